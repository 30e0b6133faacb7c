//! Cycle-level model of a 2D mesh of routers and PEs.
//!
//! Every router has five links (four cardinal neighbours plus the ramp to its
//! own PE). Packets are single 32-bit words tagged with a color; the router
//! configuration decides, per color, which input link is accepted and which
//! subset of links the packet is copied to. Routing can be changed at run time
//! by command packets travelling through the fabric, which is how the
//! localized broadcast patterns shift from one step to the next.

mod grid;
mod router;

pub use grid::{
    BroadcastReport, ColorCounters, DeliveryMap, FabricGrid, LinkCounters, PeDelivery, RoleRecord, Source, TraceRecord,
    DEFAULT_QUEUE_CAPACITY, MAX_QUEUE_CAPACITY,
};
pub(crate) use router::route_color;
pub use router::{apply_command, route, ColorRoute, LaneState, RouterConfig};

use serde::{Deserialize, Serialize};

use crate::error::FabricError;

/// Default number of colors available on the fabric.
pub const DEFAULT_COLOR_BUDGET: u8 = 24;

/// Number of PEs in one broadcast window (the root and four receivers).
pub const WINDOW: usize = 5;

/// One of the five links of a router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinkDirection {
    East,
    West,
    North,
    South,
    Ramp,
}

impl LinkDirection {
    pub const ALL: [LinkDirection; 5] = [
        LinkDirection::East,
        LinkDirection::West,
        LinkDirection::North,
        LinkDirection::South,
        LinkDirection::Ramp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Link on the neighbouring router that faces this one. The ramp faces itself.
    pub fn opposite(self) -> Self {
        match self {
            LinkDirection::East => LinkDirection::West,
            LinkDirection::West => LinkDirection::East,
            LinkDirection::North => LinkDirection::South,
            LinkDirection::South => LinkDirection::North,
            LinkDirection::Ramp => LinkDirection::Ramp,
        }
    }

    /// Grid offset of the neighbour reached through this link. `y` grows southward.
    pub fn offset(self) -> (isize, isize) {
        match self {
            LinkDirection::East => (1, 0),
            LinkDirection::West => (-1, 0),
            LinkDirection::North => (0, -1),
            LinkDirection::South => (0, 1),
            LinkDirection::Ramp => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkDirection::East => "east",
            LinkDirection::West => "west",
            LinkDirection::North => "north",
            LinkDirection::South => "south",
            LinkDirection::Ramp => "ramp",
        }
    }
}

/// A subset of the five links, as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LinkSet(u8);

impl LinkSet {
    pub const EMPTY: LinkSet = LinkSet(0);

    pub fn of(links: &[LinkDirection]) -> Self {
        LinkSet(links.iter().fold(0, |m, l| m | (1 << l.index())))
    }

    pub fn contains(self, link: LinkDirection) -> bool {
        self.0 & (1 << link.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = LinkDirection> {
        LinkDirection::ALL.into_iter().filter(move |l| self.contains(*l))
    }
}

/// Direction in which a broadcast pattern moves data across the fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    East,
    West,
    North,
    South,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::East, Direction::West, Direction::North, Direction::South];

    /// Outgoing link towards the downstream neighbour.
    pub fn downstream(self) -> LinkDirection {
        match self {
            Direction::East => LinkDirection::East,
            Direction::West => LinkDirection::West,
            Direction::North => LinkDirection::North,
            Direction::South => LinkDirection::South,
        }
    }

    /// Incoming link from the upstream neighbour.
    pub fn upstream(self) -> LinkDirection {
        self.downstream().opposite()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Default color pair: East 0/1, West 2/3, North 4/5, South 6/7.
    pub fn default_colors(self) -> ColorPair {
        let base = 2 * self.index() as u8;
        ColorPair {
            data: Color(base),
            control: Color(base + 1),
        }
    }

    /// Position of `(x, y)` counted from the upstream edge, and the length of
    /// its line, on a `width` x `height` fabric.
    pub fn lane_position(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        match self {
            Direction::East => (x, width),
            Direction::West => (width - 1 - x, width),
            Direction::South => (y, height),
            Direction::North => (height - 1 - y, height),
        }
    }
}

/// Channel id carried by every packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Color(pub u8);

impl std::fmt::Display for Color {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The two colors of one broadcast pattern: wavefield words travel on `data`,
/// routing updates on `control`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColorPair {
    pub data: Color,
    pub control: Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    Data,
    Command,
}

/// Where a packet entered the fabric. Simulation metadata only; it is not part
/// of the 32-bit word and routing never looks at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Pe { x: usize, y: usize },
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub payload: u32,
    pub color: Color,
    pub kind: PacketKind,
    pub origin: Origin,
}

impl Packet {
    pub fn data(payload: u32, color: Color, origin: Origin) -> Self {
        Packet {
            payload,
            color,
            kind: PacketKind::Data,
            origin,
        }
    }

    pub fn command(cmd: Command, color: Color, origin: Origin) -> Self {
        Packet {
            payload: cmd.encode(),
            color,
            kind: PacketKind::Command,
            origin,
        }
    }
}

/// Router role within one broadcast window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BroadcastRole {
    /// Configuration 0: injects its own block and receives it back.
    Root,
    /// Configuration 1: relays downstream and delivers to its PE.
    Middle,
    /// Configuration 2: delivers to its PE only.
    Last,
}

impl BroadcastRole {
    /// Role of a router `distance` hops downstream of the window root.
    pub fn from_distance(distance: u8) -> Self {
        match distance {
            0 => BroadcastRole::Root,
            d if d as usize == WINDOW - 1 => BroadcastRole::Last,
            _ => BroadcastRole::Middle,
        }
    }

    pub fn configuration(self) -> u8 {
        match self {
            BroadcastRole::Root => 0,
            BroadcastRole::Middle => 1,
            BroadcastRole::Last => 2,
        }
    }
}

const SHIFT_OPCODE: u32 = 0xA5;

/// Routing update carried by a command packet.
///
/// Word layout: bits 24..32 opcode, bits 16..24 data color of the pattern,
/// bits 0..16 the step being completed (wrapping).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Shift { pattern: Color, step: u16 },
}

impl Command {
    pub fn encode(self) -> u32 {
        match self {
            Command::Shift { pattern, step } => (SHIFT_OPCODE << 24) | ((pattern.0 as u32) << 16) | step as u32,
        }
    }

    pub fn decode(word: u32) -> Result<Self, FabricError> {
        if word >> 24 != SHIFT_OPCODE {
            return Err(FabricError::MalformedCommand(word));
        }
        Ok(Command::Shift {
            pattern: Color(((word >> 16) & 0xff) as u8),
            step: (word & 0xffff) as u16,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_word_roundtrip() {
        let cmd = Command::Shift {
            pattern: Color(6),
            step: 0xBEEF,
        };
        assert_eq!(Command::decode(cmd.encode()).unwrap(), cmd);
        assert!(matches!(Command::decode(0x1234_5678), Err(FabricError::MalformedCommand(_))));
    }

    #[test]
    fn five_links_and_opposites() {
        assert_eq!(LinkDirection::ALL.len(), 5);
        for l in LinkDirection::ALL {
            assert_eq!(l.opposite().opposite(), l);
        }
        let set = LinkSet::of(&[LinkDirection::East, LinkDirection::Ramp]);
        assert_eq!(set.len(), 2);
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![LinkDirection::East, LinkDirection::Ramp]);
    }

    #[test]
    fn default_colors_are_disjoint_and_within_budget() {
        let mut seen = std::collections::HashSet::new();
        for d in Direction::ALL {
            let c = d.default_colors();
            assert!(seen.insert(c.data) && seen.insert(c.control));
            assert!(c.control.0 < DEFAULT_COLOR_BUDGET);
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn lane_positions_start_at_upstream_edge() {
        assert_eq!(Direction::East.lane_position(0, 2, 6, 3), (0, 6));
        assert_eq!(Direction::West.lane_position(0, 2, 6, 3), (5, 6));
        assert_eq!(Direction::South.lane_position(4, 0, 6, 3), (0, 3));
        assert_eq!(Direction::North.lane_position(4, 0, 6, 3), (2, 3));
    }
}
