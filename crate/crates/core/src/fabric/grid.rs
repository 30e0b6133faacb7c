use serde::Serialize;

use super::{
    route_color, BroadcastRole, Color, ColorPair, Command, Direction, LinkDirection, LinkSet, Origin, Packet, PacketKind, RouterConfig,
    DEFAULT_COLOR_BUDGET, WINDOW,
};
use crate::error::FabricError;

/// Default capacity of each router input queue, in words.
pub const DEFAULT_QUEUE_CAPACITY: usize = 8;

/// Largest supported queue capacity.
pub const MAX_QUEUE_CAPACITY: usize = 4096;

const LINKS: usize = 5;

/// Packets moved through one link of one router.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkCounters {
    /// Data words leaving the router on this link (for the ramp: delivered to the PE).
    pub sent: u64,
    /// Data words entering the router on this link (for the ramp: injected by the PE).
    pub received: u64,
    pub commands_sent: u64,
    pub commands_received: u64,
}

impl LinkCounters {
    fn count(&mut self, kind: PacketKind, outgoing: bool) {
        match (kind, outgoing) {
            (PacketKind::Data, true) => self.sent += 1,
            (PacketKind::Data, false) => self.received += 1,
            (PacketKind::Command, true) => self.commands_sent += 1,
            (PacketKind::Command, false) => self.commands_received += 1,
        }
    }
}

/// Per-color packet accounting. Every injected packet ends its path exactly
/// once: consumed by a PE whose router does not forward it, or dropped off
/// the fabric edge. Copies handed to relaying PEs are counted in `delivered`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ColorCounters {
    pub injected_ramp: u64,
    pub injected_boundary: u64,
    pub delivered: u64,
    pub terminated: u64,
    pub dropped: u64,
}

/// One packet copy leaving a router.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub x: usize,
    pub y: usize,
    pub link: LinkDirection,
    pub color: Color,
    pub kind: PacketKind,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "cycle,pe_x,pe_y,link,color,kind";

    pub fn to_csv(&self) -> String {
        let kind = match self.kind {
            PacketKind::Data => "data",
            PacketKind::Command => "command",
        };
        format!(
            "{},{},{},{},{},{}",
            self.cycle,
            self.x,
            self.y,
            self.link.name(),
            self.color,
            kind
        )
    }
}

/// Role a router held when it applied a shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleRecord {
    pub direction: Direction,
    pub x: usize,
    pub y: usize,
    pub step: u16,
    pub role: BroadcastRole,
}

/// Who sent the words held in one receive slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Pe { x: usize, y: usize },
    /// Zero words standing in for a neighbour beyond the fabric edge.
    Boundary,
    /// Words from more than one sender landed in the slot.
    Mixed,
    Missing,
}

impl From<Origin> for Source {
    fn from(o: Origin) -> Self {
        match o {
            Origin::Pe { x, y } => Source::Pe { x, y },
            Origin::Boundary => Source::Boundary,
        }
    }
}

/// Words received by every PE during one broadcast.
///
/// Each PE holds `5 b` words in five slots ordered by distance to the sender,
/// farthest first: slot `s` comes from `4 - s` hops upstream, slot 4 is the
/// PE's own block.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryMap {
    pub direction: Direction,
    pub width: usize,
    pub height: usize,
    pub b: usize,
    words: Vec<u32>,
    fill: Vec<[usize; WINDOW]>,
    sources: Vec<[Source; WINDOW]>,
    /// Sender codes while the broadcast runs; turned into `sources` at the end.
    codes: Vec<[u32; WINDOW]>,
}

const CODE_BOUNDARY: u32 = u32::MAX;
const CODE_MISSING: u32 = u32::MAX - 1;
const CODE_MIXED: u32 = u32::MAX - 2;

/// Borrowed view of one PE's receive area.
#[derive(Debug, Clone, Copy)]
pub struct PeDelivery<'a> {
    pub words: &'a [u32],
    pub sources: &'a [Source; WINDOW],
    b: usize,
}

impl<'a> PeDelivery<'a> {
    pub fn slot(&self, s: usize) -> &'a [u32] {
        &self.words[s * self.b..(s + 1) * self.b]
    }
}

impl DeliveryMap {
    fn new(direction: Direction, width: usize, height: usize, b: usize) -> Self {
        let n = width * height;
        DeliveryMap {
            direction,
            width,
            height,
            b,
            words: vec![0; n * WINDOW * b],
            fill: vec![[0; WINDOW]; n],
            sources: vec![[Source::Missing; WINDOW]; n],
            codes: vec![[CODE_MISSING; WINDOW]; n],
        }
    }

    pub fn pe(&self, x: usize, y: usize) -> PeDelivery<'_> {
        let i = y * self.width + x;
        let span = WINDOW * self.b;
        PeDelivery {
            words: &self.words[i * span..(i + 1) * span],
            sources: &self.sources[i],
            b: self.b,
        }
    }

    /// All receive areas, PE-major in row-major PE order.
    pub fn words(&self) -> &[u32] {
        &self.words
    }

    fn deliver(&mut self, pe: usize, slot: usize, flit: &Flit) -> Result<(), FabricError> {
        let n = self.fill[pe][slot];
        if n >= self.b {
            return Err(self.mismatch(pe, slot, n + 1));
        }
        self.words[(pe * WINDOW + slot) * self.b + n] = flit.payload;
        self.fill[pe][slot] = n + 1;
        let entry = &mut self.codes[pe][slot];
        *entry = match *entry {
            CODE_MISSING => flit.origin,
            c if c == flit.origin => c,
            _ => CODE_MIXED,
        };
        Ok(())
    }

    fn finish(&mut self) {
        let width = self.width;
        for (sources, codes) in self.sources.iter_mut().zip(&self.codes) {
            for (s, c) in sources.iter_mut().zip(codes) {
                *s = match *c {
                    CODE_BOUNDARY => Source::Boundary,
                    CODE_MISSING => Source::Missing,
                    CODE_MIXED => Source::Mixed,
                    r => Source::Pe {
                        x: r as usize % width,
                        y: r as usize / width,
                    },
                };
            }
        }
        self.codes = Vec::new();
    }

    fn mismatch(&self, pe: usize, slot: usize, got: usize) -> FabricError {
        FabricError::DeliveryMismatch {
            x: pe % self.width,
            y: pe / self.width,
            slot,
            got,
            expected: self.b,
        }
    }

    fn check_complete(&self) -> Result<(), FabricError> {
        for (pe, fill) in self.fill.iter().enumerate() {
            if let Some(slot) = fill.iter().position(|&n| n != self.b) {
                return Err(self.mismatch(pe, slot, fill[slot]));
            }
        }
        Ok(())
    }
}

/// Outcome of a set of broadcasts run together.
#[derive(Debug, Clone)]
pub struct BroadcastReport {
    /// One map per requested direction, in request order.
    pub maps: Vec<DeliveryMap>,
    /// Simulated cycles until the fabric was quiescent again.
    pub cycles: u64,
}

#[derive(Debug, Clone, Copy)]
struct Pattern {
    direction: Direction,
    colors: ColorPair,
}

/// A packet as held in a router queue: the origin is a router index or
/// `CODE_BOUNDARY`.
#[derive(Debug, Clone, Copy, Default)]
struct Flit {
    payload: u32,
    origin: u32,
    color: u8,
    command: bool,
}

impl Flit {
    fn kind(&self) -> PacketKind {
        if self.command {
            PacketKind::Command
        } else {
            PacketKind::Data
        }
    }
}

/// Fixed-size ring buffers, one per queue.
///
/// A queue receives at most one packet per cycle, so a packet pushed during
/// the current cycle can only be the sole entry; it becomes visible on the
/// next cycle.
#[derive(Debug, Clone, Default)]
struct Queues {
    ring: usize,
    slots: Vec<Flit>,
    head: Vec<u32>,
    len: Vec<u32>,
    last_push: Vec<u64>,
}

impl Queues {
    fn new(count: usize, ring: usize) -> Self {
        Queues {
            ring,
            slots: vec![Flit::default(); count * ring],
            head: vec![0; count],
            len: vec![0; count],
            last_push: vec![u64::MAX; count],
        }
    }

    #[inline]
    fn len(&self, q: usize) -> usize {
        self.len[q] as usize
    }

    #[inline]
    fn push(&mut self, q: usize, flit: Flit, cycle: u64) {
        let len = self.len[q] as usize;
        assert!(len < self.ring, "queue ring overrun");
        debug_assert!(self.last_push[q] != cycle, "two pushes into one queue in a cycle");
        let mut at = self.head[q] as usize + len;
        if at >= self.ring {
            at -= self.ring;
        }
        self.slots[q * self.ring + at] = flit;
        self.len[q] += 1;
        self.last_push[q] = cycle;
    }

    #[inline]
    fn pop_ready(&mut self, q: usize, cycle: u64) -> Option<Flit> {
        match self.len[q] {
            0 => None,
            1 if self.last_push[q] == cycle => None,
            _ => {
                let head = self.head[q] as usize;
                let flit = self.slots[q * self.ring + head];
                let next = head + 1;
                self.head[q] = if next == self.ring { 0 } else { next as u32 };
                self.len[q] -= 1;
                Some(flit)
            }
        }
    }
}

/// Stands in for the off-fabric roots upstream of a line: while the edge
/// router belongs to a window whose root lies beyond the edge, it feeds a
/// zero block followed by that window's shift command.
#[derive(Debug, Clone, Copy, Default)]
struct EdgeFeeder {
    feeding: Option<u16>,
    sent: usize,
    last_fed: Option<u16>,
}

/// A `width` x `height` mesh of routers, each with a PE on its ramp.
#[derive(Debug, Clone)]
pub struct FabricGrid {
    width: usize,
    height: usize,
    budget: u8,
    queue_capacity: usize,
    configs: Vec<RouterConfig>,
    patterns: Vec<Pattern>,
    queues: Queues,
    cycle: u64,
    last_cycles: u64,
    /// Router on the other side of each cardinal link, `usize::MAX` past the edge.
    neighbors: Vec<[usize; 4]>,
    links: Vec<[LinkCounters; LINKS]>,
    colors: Vec<ColorCounters>,
    trace: Option<Vec<TraceRecord>>,
    roles: Option<Vec<RoleRecord>>,
}

impl FabricGrid {
    /// Empty fabric with no broadcast patterns installed.
    pub fn new(width: usize, height: usize) -> Self {
        Self::with_limits(width, height, DEFAULT_COLOR_BUDGET, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_limits(width: usize, height: usize, budget: u8, queue_capacity: usize) -> Self {
        assert!(width > 0 && height > 0, "fabric must have at least one PE");
        assert!(
            (1..=MAX_QUEUE_CAPACITY).contains(&queue_capacity),
            "queue capacity must be in 1..={MAX_QUEUE_CAPACITY}"
        );
        let n = width * height;
        FabricGrid {
            width,
            height,
            budget,
            queue_capacity,
            configs: vec![RouterConfig::new(budget); n],
            patterns: Vec::new(),
            queues: Queues::default(),
            cycle: 0,
            last_cycles: 0,
            neighbors: (0..n).map(|r| neighbor_table(width, height, r)).collect(),
            links: vec![[LinkCounters::default(); LINKS]; n],
            colors: vec![ColorCounters::default(); budget as usize],
            trace: None,
            roles: None,
        }
    }

    /// Fabric with the four broadcast patterns on their default colors.
    pub fn with_default_patterns(width: usize, height: usize) -> Result<Self, FabricError> {
        let mut fabric = Self::new(width, height);
        for d in Direction::ALL {
            fabric.install_pattern(d, d.default_colors())?;
        }
        Ok(fabric)
    }

    /// Installs the localized broadcast pattern for `direction` on every
    /// router. Windows start at the upstream edge, so the PE at lane position
    /// `p` begins `p mod 5` hops from its root.
    pub fn install_pattern(&mut self, direction: Direction, colors: ColorPair) -> Result<(), FabricError> {
        if self.patterns.iter().any(|p| p.direction == direction) {
            return Err(FabricError::ColorCollision(colors.data));
        }
        let mut configs = self.configs.clone();
        for (i, cfg) in configs.iter_mut().enumerate() {
            let (x, y) = (i % self.width, i / self.width);
            let (pos, _) = direction.lane_position(x, y, self.width, self.height);
            cfg.add_lane(direction, colors, (pos % WINDOW) as u8)?;
        }
        self.configs = configs;
        self.patterns.push(Pattern { direction, colors });
        let n = self.width * self.height;
        // Packets of a pattern only ever wait on the ramp or the upstream link.
        self.queues = Queues::new(n * self.patterns.len() * 2, self.queue_capacity + 1);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn color_budget(&self) -> u8 {
        self.budget
    }

    pub fn queue_capacity(&self) -> usize {
        self.queue_capacity
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Cycles taken by the most recent broadcast call.
    pub fn last_cycles(&self) -> u64 {
        self.last_cycles
    }

    pub fn config(&self, x: usize, y: usize) -> &RouterConfig {
        &self.configs[y * self.width + x]
    }

    pub fn colors_of(&self, direction: Direction) -> Option<ColorPair> {
        self.patterns.iter().find(|p| p.direction == direction).map(|p| p.colors)
    }

    pub fn link_counters(&self, x: usize, y: usize) -> &[LinkCounters; LINKS] {
        &self.links[y * self.width + x]
    }

    pub fn color_counters(&self, color: Color) -> ColorCounters {
        self.colors[color.0 as usize]
    }

    /// Total packets (data and command) carried between routers.
    pub fn words_moved(&self) -> u64 {
        self.links
            .iter()
            .flat_map(|l| l[..4].iter())
            .map(|c| c.sent + c.commands_sent)
            .sum()
    }

    pub fn reset_counters(&mut self) {
        self.links.iter_mut().for_each(|l| *l = [LinkCounters::default(); LINKS]);
        self.colors.iter_mut().for_each(|c| *c = ColorCounters::default());
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn enable_role_log(&mut self) {
        self.roles.get_or_insert_with(Vec::new);
    }

    pub fn take_role_log(&mut self) -> Vec<RoleRecord> {
        self.roles.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Traffic counters keyed by (pe, link), as a JSON document.
    pub fn traffic_report(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Entry {
            pe: [usize; 2],
            link: &'static str,
            sent_words: u64,
            received_words: u64,
            sent_commands: u64,
            received_commands: u64,
        }
        let mut entries = Vec::new();
        for (i, links) in self.links.iter().enumerate() {
            for l in LinkDirection::ALL {
                let c = links[l.index()];
                if c != LinkCounters::default() {
                    entries.push(Entry {
                        pe: [i % self.width, i / self.width],
                        link: l.name(),
                        sent_words: c.sent,
                        received_words: c.received,
                        sent_commands: c.commands_sent,
                        received_commands: c.commands_received,
                    });
                }
            }
        }
        serde_json::json!({
            "width": self.width,
            "height": self.height,
            "cycles": self.cycle,
            "fabric_words_moved": self.words_moved(),
            "links": entries,
        })
    }

    /// Runs one localized broadcast: every PE sends its `b`-word block
    /// (`payload[pe * b..][..b]`, row-major PEs) to the four PEs downstream of
    /// it and to itself.
    pub fn run_broadcast(&mut self, direction: Direction, b: usize, payload: &[u32]) -> Result<DeliveryMap, FabricError> {
        let mut report = self.run_patterns(&[direction], b, payload)?;
        Ok(report.maps.remove(0))
    }

    /// Runs the four broadcast patterns at the same time, all carrying the
    /// same per-PE block. Maps are returned in [`Direction::ALL`] order.
    pub fn concurrent_broadcasts(&mut self, b: usize, payload: &[u32]) -> Result<BroadcastReport, FabricError> {
        self.run_patterns(&Direction::ALL, b, payload)
    }

    /// Runs the listed patterns together until the fabric is quiescent.
    pub fn run_patterns(&mut self, directions: &[Direction], b: usize, payload: &[u32]) -> Result<BroadcastReport, FabricError> {
        if b == 0 {
            return Err(FabricError::EmptyBlock);
        }
        let n = self.width * self.height;
        if payload.len() != n * b {
            return Err(FabricError::PayloadLength {
                pe: n,
                expected: n * b,
                got: payload.len(),
            });
        }
        let mut active = Vec::with_capacity(directions.len());
        for &d in directions {
            let p = self
                .patterns
                .iter()
                .position(|p| p.direction == d)
                .ok_or(FabricError::NoPattern(d))?;
            if active.contains(&p) {
                return Err(FabricError::ColorCollision(self.patterns[p].colors.data));
            }
            active.push(p);
        }
        let start_cycle = self.cycle;
        let maps = Session::new(self, &active, b, payload)?.run()?;
        self.last_cycles = self.cycle - start_cycle;
        Ok(BroadcastReport {
            maps,
            cycles: self.last_cycles,
        })
    }

    #[inline]
    fn qidx(&self, router: usize, pattern: usize, link: LinkDirection) -> usize {
        debug_assert!(link == LinkDirection::Ramp || link == self.patterns[pattern].direction.upstream());
        (router * self.patterns.len() + pattern) * 2 + (link != LinkDirection::Ramp) as usize
    }

    /// Router, pattern and link of a queue index.
    fn queue_link(&self, q: usize) -> (usize, LinkDirection) {
        let (rp, side) = (q / 2, q % 2);
        let p = rp % self.patterns.len();
        let link = if side == 0 {
            LinkDirection::Ramp
        } else {
            self.patterns[p].direction.upstream()
        };
        (rp / self.patterns.len(), link)
    }

    fn origin(&self, code: u32) -> Origin {
        match code {
            CODE_BOUNDARY => Origin::Boundary,
            r => Origin::Pe {
                x: r as usize % self.width,
                y: r as usize / self.width,
            },
        }
    }

    /// Router at the upstream end of each line of `direction`.
    fn edge_routers(&self, direction: Direction) -> Vec<usize> {
        let (w, h) = (self.width, self.height);
        match direction {
            Direction::East => (0..h).map(|y| y * w).collect(),
            Direction::West => (0..h).map(|y| y * w + w - 1).collect(),
            Direction::South => (0..w).collect(),
            Direction::North => (0..w).map(|x| (h - 1) * w + x).collect(),
        }
    }
}

fn neighbor_table(width: usize, height: usize, router: usize) -> [usize; 4] {
    let mut out = [usize::MAX; 4];
    for (slot, link) in out.iter_mut().zip(LinkDirection::ALL) {
        let (dx, dy) = link.offset();
        let x = (router % width) as isize + dx;
        let y = (router / width) as isize + dy;
        if x >= 0 && y >= 0 && x < width as isize && y < height as isize {
            *slot = y as usize * width + x as usize;
        }
    }
    out
}

/// Routing of one pattern at one router, cached between shift commands.
#[derive(Debug, Clone, Copy)]
struct LaneRoute {
    queue: usize,
    from_ramp: bool,
    /// Whether data and command packets go to the ramp and downstream.
    data: (bool, bool),
    control: (bool, bool),
    down: LinkDirection,
    /// Downstream router and the queue the packet lands in, `usize::MAX` past the edge.
    next: usize,
    next_queue: usize,
    slot: usize,
    distance: u8,
    step: u16,
}

/// State of one run of a set of patterns.
struct Session<'a> {
    fabric: &'a mut FabricGrid,
    active: Vec<usize>,
    b: usize,
    payload: &'a [u32],
    start_step: Vec<u16>,
    /// Per router, per active pattern.
    routes: Vec<LaneRoute>,
    /// Per active pattern, per PE: packets of its send sequence already injected.
    cursors: Vec<Vec<usize>>,
    /// Per active pattern, per PE: the step at which the PE is root.
    send_step: Vec<Vec<u16>>,
    /// Per active pattern: PEs with packets left to send and room on their ramp.
    senders: Vec<Vec<usize>>,
    listed: Vec<Vec<bool>>,
    edges: Vec<Vec<usize>>,
    feeders: Vec<Vec<EdgeFeeder>>,
    maps: Vec<DeliveryMap>,
    remaining_shifts: usize,
    in_flight: usize,
    /// Queues that may have ended the cycle over capacity.
    over: Vec<usize>,
}

impl<'a> Session<'a> {
    fn new(fabric: &'a mut FabricGrid, active: &[usize], b: usize, payload: &'a [u32]) -> Result<Self, FabricError> {
        let n = fabric.width * fabric.height;
        let mut start_step = Vec::new();
        let mut send_step = Vec::new();
        let mut edges = Vec::new();
        let mut feeders = Vec::new();
        let mut maps = Vec::new();
        for &p in active {
            let lane = |r: usize| fabric.configs[r].lanes()[p];
            let start = lane(0).step;
            start_step.push(start);
            send_step.push((0..n).map(|r| start.wrapping_add(lane(r).distance as u16)).collect());
            let e = fabric.edge_routers(fabric.patterns[p].direction);
            feeders.push(vec![EdgeFeeder::default(); e.len()]);
            edges.push(e);
            maps.push(DeliveryMap::new(fabric.patterns[p].direction, fabric.width, fabric.height, b));
        }
        let mut session = Session {
            active: active.to_vec(),
            b,
            payload,
            start_step,
            routes: Vec::with_capacity(n * active.len()),
            cursors: vec![vec![0; n]; active.len()],
            send_step,
            senders: vec![(0..n).collect(); active.len()],
            listed: vec![vec![true; n]; active.len()],
            edges,
            feeders,
            maps,
            remaining_shifts: n * WINDOW * active.len(),
            in_flight: 0,
            over: Vec::new(),
            fabric,
        };
        for r in 0..n {
            for a in 0..active.len() {
                let route = session.lane_route(r, a)?;
                session.routes.push(route);
            }
        }
        Ok(session)
    }

    fn lane_route(&self, r: usize, a: usize) -> Result<LaneRoute, FabricError> {
        let p = self.active[a];
        let cfg = &self.fabric.configs[r];
        let lane = cfg.lanes()[p];
        let input = lane.accepted_input();
        let down = lane.direction.downstream();
        let split = |set: LinkSet| {
            debug_assert!(set.iter().all(|l| l == down || l == LinkDirection::Ramp));
            (set.contains(LinkDirection::Ramp), set.contains(down))
        };
        let next = self.fabric.neighbors[r][down.index()];
        let next_queue = if next == usize::MAX {
            usize::MAX
        } else {
            self.fabric.qidx(next, p, down.opposite())
        };
        Ok(LaneRoute {
            queue: self.fabric.qidx(r, p, input),
            from_ramp: input == LinkDirection::Ramp,
            data: split(route_color(cfg, lane.colors.data, input)?),
            control: split(route_color(cfg, lane.colors.control, input)?),
            down,
            next,
            next_queue,
            slot: WINDOW - 1 - lane.distance as usize,
            distance: lane.distance,
            step: lane.step,
        })
    }

    fn run(mut self) -> Result<Vec<DeliveryMap>, FabricError> {
        while self.remaining_shifts > 0 || self.in_flight > 0 {
            let moved = self.route_cycle()?;
            let injected = self.inject();
            self.fabric.cycle += 1;
            if !moved && !injected {
                return Err(FabricError::Deadlock {
                    cycle: self.fabric.cycle,
                });
            }
        }
        for m in &mut self.maps {
            m.check_complete()?;
            m.finish();
        }
        Ok(self.maps)
    }

    #[inline]
    fn push(&mut self, q: usize, flit: Flit) {
        self.fabric.queues.push(q, flit, self.fabric.cycle);
        self.in_flight += 1;
        if self.fabric.queues.len(q) > self.fabric.queue_capacity {
            self.over.push(q);
        }
    }

    /// Every router forwards at most one packet per pattern. Forwarded copies
    /// become visible downstream on the next cycle.
    fn route_cycle(&mut self) -> Result<bool, FabricError> {
        let cycle = self.fabric.cycle;
        let n = self.fabric.width * self.fabric.height;
        let na = self.active.len();
        let tracing = self.fabric.trace.is_some();
        let mut moved = false;
        self.over.clear();
        for r in 0..n {
            for a in 0..na {
                let route = self.routes[r * na + a];
                let Some(flit) = self.fabric.queues.pop_ready(route.queue, cycle) else {
                    continue;
                };
                self.in_flight -= 1;
                moved = true;
                if route.from_ramp && self.cursors[a][r] <= self.b && !self.listed[a][r] {
                    self.listed[a][r] = true;
                    self.senders[a].push(r);
                }
                let kind = flit.kind();
                let (to_ramp, forward) = if flit.command { route.control } else { route.data };
                if forward {
                    if tracing {
                        self.record(r, route.down, Color(flit.color), kind);
                    }
                    if route.next != usize::MAX {
                        self.fabric.links[r][route.down.index()].count(kind, true);
                        self.fabric.links[route.next][route.down.opposite().index()].count(kind, false);
                        self.push(route.next_queue, flit);
                    } else {
                        self.fabric.colors[flit.color as usize].dropped += 1;
                    }
                }
                if to_ramp {
                    if tracing {
                        self.record(r, LinkDirection::Ramp, Color(flit.color), kind);
                    }
                    self.fabric.links[r][LinkDirection::Ramp.index()].count(kind, true);
                    if !flit.command {
                        self.maps[a].deliver(r, route.slot, &flit)?;
                    }
                }
                if to_ramp {
                    let counters = &mut self.fabric.colors[flit.color as usize];
                    if forward {
                        counters.delivered += 1;
                    } else {
                        counters.terminated += 1;
                    }
                }
                if flit.command {
                    self.apply_command(r, a, &route, &flit)?;
                }
            }
        }
        let cap = self.fabric.queue_capacity;
        for &q in &self.over {
            if self.fabric.queues.len(q) > cap {
                let (router, link) = self.fabric.queue_link(q);
                return Err(FabricError::QueueOverflow {
                    x: router % self.fabric.width,
                    y: router / self.fabric.width,
                    link,
                    capacity: cap,
                });
            }
        }
        Ok(moved)
    }

    fn apply_command(&mut self, r: usize, a: usize, route: &LaneRoute, flit: &Flit) -> Result<(), FabricError> {
        let p = self.active[a];
        if let Some(log) = self.fabric.roles.as_mut() {
            log.push(RoleRecord {
                direction: self.fabric.patterns[p].direction,
                x: r % self.fabric.width,
                y: r / self.fabric.width,
                step: route.step,
                role: BroadcastRole::from_distance(route.distance),
            });
        }
        let packet = Packet {
            payload: flit.payload,
            color: Color(flit.color),
            kind: PacketKind::Command,
            origin: self.fabric.origin(flit.origin),
        };
        self.fabric.configs[r].apply(&packet)?;
        self.routes[r * self.active.len() + a] = self.lane_route(r, a)?;
        self.remaining_shifts -= 1;
        Ok(())
    }

    fn record(&mut self, router: usize, link: LinkDirection, color: Color, kind: PacketKind) {
        if let Some(trace) = self.fabric.trace.as_mut() {
            trace.push(TraceRecord {
                cycle: self.fabric.cycle,
                x: router % self.fabric.width,
                y: router / self.fabric.width,
                link,
                color,
                kind,
            });
        }
    }

    /// PEs push their send sequence (block, then shift command) into the ramp
    /// queue, one word per cycle per pattern, stalling while it is full. Edge
    /// feeders do the same on the upstream link of the edge routers.
    fn inject(&mut self) -> bool {
        let cap = self.fabric.queue_capacity;
        let b = self.b;
        let mut injected = false;
        for a in 0..self.active.len() {
            let p = self.active[a];
            let colors = self.fabric.patterns[p].colors;
            let mut senders = std::mem::take(&mut self.senders[a]);
            senders.retain(|&r| {
                let cursor = self.cursors[a][r];
                let q = self.fabric.qidx(r, p, LinkDirection::Ramp);
                let flit = if cursor < b {
                    Flit {
                        payload: self.payload[r * b + cursor],
                        origin: r as u32,
                        color: colors.data.0,
                        command: false,
                    }
                } else {
                    let cmd = Command::Shift {
                        pattern: colors.data,
                        step: self.send_step[a][r],
                    };
                    Flit {
                        payload: cmd.encode(),
                        origin: r as u32,
                        color: colors.control.0,
                        command: true,
                    }
                };
                self.cursors[a][r] = cursor + 1;
                self.fabric.links[r][LinkDirection::Ramp.index()].count(flit.kind(), false);
                self.fabric.colors[flit.color as usize].injected_ramp += 1;
                self.push(q, flit);
                injected = true;
                let keep = cursor < b && self.fabric.queues.len(q) < cap;
                self.listed[a][r] = keep;
                keep
            });
            self.senders[a] = senders;
            injected |= self.feed_edges(a);
        }
        injected
    }

    fn feed_edges(&mut self, a: usize) -> bool {
        let p = self.active[a];
        let Pattern { direction, colors } = self.fabric.patterns[p];
        let up = direction.upstream();
        let cap = self.fabric.queue_capacity;
        let b = self.b;
        let mut injected = false;
        for e in 0..self.edges[a].len() {
            let r = self.edges[a][e];
            let lane = self.fabric.configs[r].lanes()[p];
            let mut feeder = self.feeders[a][e];
            if feeder.feeding.is_none() {
                let rel = lane.step.wrapping_sub(self.start_step[a]) as usize;
                if rel < WINDOW && lane.distance != 0 && feeder.last_fed != Some(lane.step) {
                    feeder.feeding = Some(lane.step);
                    feeder.sent = 0;
                }
            }
            if let Some(step) = feeder.feeding {
                let q = self.fabric.qidx(r, p, up);
                if self.fabric.queues.len(q) < cap {
                    let flit = if feeder.sent < b {
                        Flit {
                            payload: 0,
                            origin: CODE_BOUNDARY,
                            color: colors.data.0,
                            command: false,
                        }
                    } else {
                        let cmd = Command::Shift {
                            pattern: colors.data,
                            step,
                        };
                        Flit {
                            payload: cmd.encode(),
                            origin: CODE_BOUNDARY,
                            color: colors.control.0,
                            command: true,
                        }
                    };
                    feeder.sent += 1;
                    if feeder.sent > b {
                        feeder.feeding = None;
                        feeder.last_fed = Some(step);
                    }
                    self.fabric.links[r][up.index()].count(flit.kind(), false);
                    self.fabric.colors[flit.color as usize].injected_boundary += 1;
                    self.push(q, flit);
                    injected = true;
                }
            }
            self.feeders[a][e] = feeder;
        }
        injected
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(w: usize, h: usize, b: usize) -> Vec<u32> {
        (0..w * h * b).map(|i| 1000 + i as u32).collect()
    }

    #[test]
    fn single_pe_gets_itself_and_four_zero_blocks() {
        let mut f = FabricGrid::with_default_patterns(1, 1).unwrap();
        let m = f.run_broadcast(Direction::East, 1, &[42]).unwrap();
        let pe = m.pe(0, 0);
        assert_eq!(pe.words, &[0, 0, 0, 0, 42]);
        assert_eq!(&pe.sources[..4], &[Source::Boundary; 4]);
        assert_eq!(pe.sources[4], Source::Pe { x: 0, y: 0 });
    }

    #[test]
    fn row_of_six_eastward() {
        let (w, b) = (6, 3);
        let data = payload(w, 1, b);
        let mut f = FabricGrid::with_default_patterns(w, 1).unwrap();
        let m = f.run_broadcast(Direction::East, b, &data).unwrap();
        let last = m.pe(5, 0);
        for s in 0..5 {
            let src = 1 + s;
            assert_eq!(last.sources[s], Source::Pe { x: src, y: 0 });
            assert_eq!(last.slot(s), &data[src * b..(src + 1) * b]);
        }
        let first = m.pe(0, 0);
        assert!(first.words[..12].iter().all(|w| *w == 0));
        assert_eq!(first.slot(4), &data[..b]);
    }

    #[test]
    fn patterns_return_to_their_initial_configuration() {
        let mut f = FabricGrid::with_default_patterns(7, 3).unwrap();
        let before: Vec<_> = (0..21).map(|i| f.config(i % 7, i / 7).lanes().iter().map(|l| l.distance).collect::<Vec<_>>()).collect();
        f.concurrent_broadcasts(2, &payload(7, 3, 2)).unwrap();
        let after: Vec<_> = (0..21).map(|i| f.config(i % 7, i / 7).lanes().iter().map(|l| l.distance).collect::<Vec<_>>()).collect();
        assert_eq!(before, after);
        assert!(f.config(0, 0).lanes().iter().all(|l| l.step == 5));
    }

    #[test]
    fn missing_pattern_and_bad_payload() {
        let mut f = FabricGrid::new(3, 3);
        assert!(matches!(
            f.run_broadcast(Direction::East, 1, &[0; 9]),
            Err(FabricError::NoPattern(Direction::East))
        ));
        f.install_pattern(Direction::East, Direction::East.default_colors()).unwrap();
        assert!(f.run_broadcast(Direction::East, 1, &[0; 8]).is_err());
        assert_eq!(f.run_broadcast(Direction::East, 0, &[]).unwrap_err(), FabricError::EmptyBlock);
        assert!(matches!(
            f.install_pattern(Direction::West, Direction::East.default_colors()),
            Err(FabricError::ColorCollision(_))
        ));
    }

    #[test]
    fn small_queues_tolerate_the_protocol() {
        let mut f = FabricGrid::with_limits(8, 1, DEFAULT_COLOR_BUDGET, 1);
        f.install_pattern(Direction::East, Direction::East.default_colors()).unwrap();
        f.run_broadcast(Direction::East, 6, &payload(8, 1, 6)).unwrap();
    }

    #[test]
    fn blocked_link_overflows() {
        let mut f = FabricGrid::with_limits(8, 1, DEFAULT_COLOR_BUDGET, 2);
        let colors = Direction::East.default_colors();
        f.install_pattern(Direction::East, colors).unwrap();
        // Two adjacent roots: the second one refuses the first one's data
        // while it is still sending its own block.
        f.configs[1] = RouterConfig::broadcast(DEFAULT_COLOR_BUDGET, Direction::East, colors, 0).unwrap();
        let err = f.run_broadcast(Direction::East, 6, &payload(8, 1, 6)).unwrap_err();
        assert!(matches!(err, FabricError::QueueOverflow { x: 1, .. }), "{err:?}");
    }

    #[test]
    fn trace_rows_are_csv() {
        let mut f = FabricGrid::with_default_patterns(2, 1).unwrap();
        f.enable_trace();
        f.run_broadcast(Direction::East, 1, &[1, 2]).unwrap();
        let trace = f.take_trace();
        assert!(!trace.is_empty());
        let line = trace[0].to_csv();
        assert_eq!(line.split(',').count(), TraceRecord::CSV_HEADER.split(',').count());
        assert!(trace.iter().all(|t| t.color.0 < 2));
    }
}
