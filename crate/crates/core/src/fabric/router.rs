use super::{BroadcastRole, Color, ColorPair, Command, Direction, LinkDirection, LinkSet, Packet, PacketKind, WINDOW};
use crate::error::FabricError;

/// Routing entry for one color.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorRoute {
    pub inputs: LinkSet,
    pub outputs: LinkSet,
}

/// Broadcast-pattern state of one router.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneState {
    pub direction: Direction,
    pub colors: ColorPair,
    /// Hops from the root of the window this router currently belongs to.
    pub distance: u8,
    /// Number of shifts applied so far (wrapping).
    pub step: u16,
}

impl LaneState {
    pub fn role(&self) -> BroadcastRole {
        BroadcastRole::from_distance(self.distance)
    }

    /// Data and control routes implied by the current role.
    fn routes(&self) -> (ColorRoute, ColorRoute) {
        let up = self.direction.upstream();
        let down = self.direction.downstream();
        let ramp = LinkDirection::Ramp;
        let entry = |inputs: &[LinkDirection], outputs: &[LinkDirection]| ColorRoute {
            inputs: LinkSet::of(inputs),
            outputs: LinkSet::of(outputs),
        };
        match self.role() {
            BroadcastRole::Root => (entry(&[ramp], &[down, ramp]), entry(&[ramp], &[down])),
            BroadcastRole::Middle => (entry(&[up], &[down, ramp]), entry(&[up], &[down])),
            BroadcastRole::Last => (entry(&[up], &[ramp]), entry(&[up], &[ramp])),
        }
    }

    /// Link this router currently accepts the pattern's packets on.
    pub fn accepted_input(&self) -> LinkDirection {
        match self.role() {
            BroadcastRole::Root => LinkDirection::Ramp,
            _ => self.direction.upstream(),
        }
    }
}

/// Per-color routing table of one router, plus the broadcast lanes that
/// generated it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterConfig {
    budget: u8,
    routes: Vec<Option<ColorRoute>>,
    lanes: Vec<LaneState>,
}

impl RouterConfig {
    pub fn new(budget: u8) -> Self {
        RouterConfig {
            budget,
            routes: vec![None; budget as usize],
            lanes: Vec::new(),
        }
    }

    /// Config holding a single broadcast lane at the given distance from its root.
    pub fn broadcast(budget: u8, direction: Direction, colors: ColorPair, distance: u8) -> Result<Self, FabricError> {
        let mut cfg = RouterConfig::new(budget);
        cfg.add_lane(direction, colors, distance)?;
        Ok(cfg)
    }

    pub fn add_lane(&mut self, direction: Direction, colors: ColorPair, distance: u8) -> Result<(), FabricError> {
        for c in [colors.data, colors.control] {
            if c.0 >= self.budget {
                return Err(FabricError::ColorOutOfBudget(c, self.budget));
            }
            if self.routes[c.0 as usize].is_some() {
                return Err(FabricError::ColorCollision(c));
            }
        }
        if colors.data == colors.control {
            return Err(FabricError::ColorCollision(colors.data));
        }
        let lane = LaneState {
            direction,
            colors,
            distance: distance % WINDOW as u8,
            step: 0,
        };
        self.lanes.push(lane);
        self.refresh(self.lanes.len() - 1);
        Ok(())
    }

    fn refresh(&mut self, lane: usize) {
        let state = self.lanes[lane];
        let (data, control) = state.routes();
        self.routes[state.colors.data.0 as usize] = Some(data);
        self.routes[state.colors.control.0 as usize] = Some(control);
    }

    pub fn budget(&self) -> u8 {
        self.budget
    }

    pub fn lanes(&self) -> &[LaneState] {
        &self.lanes
    }

    pub fn lane(&self, direction: Direction) -> Option<&LaneState> {
        self.lanes.iter().find(|l| l.direction == direction)
    }

    pub fn role(&self, direction: Direction) -> Option<BroadcastRole> {
        self.lane(direction).map(LaneState::role)
    }

    pub fn route_for(&self, color: Color) -> Option<ColorRoute> {
        self.routes.get(color.0 as usize).copied().flatten()
    }

    /// Applies a command packet in place. See [`apply_command`].
    pub fn apply(&mut self, cmd: &Packet) -> Result<(), FabricError> {
        if cmd.kind != PacketKind::Command {
            return Err(FabricError::NotACommand);
        }
        let Command::Shift { pattern, step } = Command::decode(cmd.payload)?;
        let idx = self
            .lanes
            .iter()
            .position(|l| l.colors.data == pattern)
            .ok_or(FabricError::MalformedCommand(cmd.payload))?;
        let lane = &mut self.lanes[idx];
        if lane.step != step {
            return Err(FabricError::StepMismatch {
                expected: lane.step,
                got: step,
            });
        }
        // The first downstream neighbour becomes the next root, so everyone
        // moves one hop closer to it; the old root becomes the last receiver
        // of the window behind it.
        lane.distance = (lane.distance + WINDOW as u8 - 1) % WINDOW as u8;
        lane.step = lane.step.wrapping_add(1);
        self.refresh(idx);
        Ok(())
    }
}

/// Output links for `packet` arriving on `arrived_on`.
pub fn route(cfg: &RouterConfig, packet: &Packet, arrived_on: LinkDirection) -> Result<LinkSet, FabricError> {
    route_color(cfg, packet.color, arrived_on)
}

#[inline]
pub(crate) fn route_color(cfg: &RouterConfig, color: Color, arrived_on: LinkDirection) -> Result<LinkSet, FabricError> {
    match cfg.route_for(color) {
        Some(r) if r.inputs.contains(arrived_on) && !r.outputs.is_empty() => Ok(r.outputs),
        _ => Err(FabricError::ColorNotRouted { color, arrived_on }),
    }
}

/// Returns the configuration after a routing-update command. The PE attached
/// to the router is not involved.
pub fn apply_command(cfg: &RouterConfig, cmd: &Packet) -> Result<RouterConfig, FabricError> {
    let mut next = cfg.clone();
    next.apply(cmd)?;
    Ok(next)
}
