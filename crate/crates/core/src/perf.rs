//! Roofline and throughput arithmetic for the wafer-scale kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes in one fabric or memory word.
pub const WORD_BYTES: f64 = 4.0;

/// Traffic of one instruction class, per instruction per cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpClass {
    pub name: &'static str,
    /// Instructions per cell.
    pub count: u32,
    pub flops: u32,
    /// Memory loads independent of `b`.
    pub loads: f64,
    /// Memory loads amortized over a block, i.e. the coefficient of `1/b`.
    pub loads_per_block: f64,
    pub stores: f64,
    pub fabric_loads: f64,
}

impl OpClass {
    fn memory_words(&self, b: f64) -> f64 {
        self.count as f64 * (self.loads + self.loads_per_block / b + self.stores)
    }
}

/// Per-cell instruction and traffic counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstructionMix {
    pub ops: Vec<OpClass>,
    /// FLOP executed only because of hardware constraints, on top of the required ones.
    pub extra_flops: u32,
}

impl InstructionMix {
    /// The traffic table exactly as printed: 17 FMUL, 17 FADD, 8 FMA, 1 FSUB.
    /// Memory traffic tends to 95 words per cell for large blocks.
    pub fn table() -> Self {
        let op = |name, count, flops, loads, loads_per_block, fabric_loads| OpClass {
            name,
            count,
            flops,
            loads,
            loads_per_block,
            stores: 1.0,
            fabric_loads,
        };
        InstructionMix {
            ops: vec![
                op("fmul", 17, 1, 0.0, 1.0, 1.0),
                op("fadd", 17, 1, 2.0, 0.0, 0.0),
                op("fma", 8, 2, 2.0, 1.0, 0.0),
                op("fsub", 1, 1, 2.0, 0.0, 0.0),
            ],
            // 3 FMUL on zero-weighted own blocks and the 3 FADD that sum them.
            extra_flops: 6,
        }
    }

    /// The table plus one memory load per FMUL for the fabric operand, which
    /// lands in a receive area before it is multiplied. This is the
    /// accounting that reaches 112 words per cell for large blocks.
    pub fn wse2() -> Self {
        let mut mix = Self::table();
        mix.ops[0].loads += 1.0;
        mix
    }

    pub fn required_flops(&self) -> u32 {
        self.ops.iter().map(|o| o.count * o.flops).sum()
    }

    pub fn executed_flops(&self) -> u32 {
        self.required_flops() + self.extra_flops
    }

    /// Memory words loaded and stored per cell for block length `b`
    /// (`f64::INFINITY` gives the large-block limit).
    pub fn memory_words(&self, b: f64) -> f64 {
        assert!(b >= 1.0, "block length must be at least 1");
        self.ops.iter().map(|o| o.memory_words(b)).sum()
    }

    pub fn fabric_words(&self) -> f64 {
        self.ops.iter().map(|o| o.count as f64 * o.fabric_loads).sum()
    }

    pub fn words(&self, resource: Resource, b: f64) -> f64 {
        match resource {
            Resource::Memory => self.memory_words(b),
            Resource::Fabric => self.fabric_words(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Memory,
    Fabric,
}

impl Resource {
    pub fn name(self) -> &'static str {
        match self {
            Resource::Memory => "memory",
            Resource::Fabric => "fabric",
        }
    }
}

/// What limits the attainable rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
    Fabric,
}

impl Bound {
    pub fn label(self) -> &'static str {
        match self {
            Bound::Compute => "compute bound",
            Bound::Memory => "memory bound",
            Bound::Fabric => "fabric bound",
        }
    }
}

impl From<Resource> for Bound {
    fn from(r: Resource) -> Self {
        match r {
            Resource::Memory => Bound::Memory,
            Resource::Fabric => Bound::Fabric,
        }
    }
}

/// Required FLOP per byte moved on `resource`.
pub fn arithmetic_intensity(mix: &InstructionMix, resource: Resource, b: f64) -> f64 {
    mix.required_flops() as f64 / (WORD_BYTES * mix.words(resource, b))
}

/// Per-PE machine parameters. Rates are per cycle; `clock_hz` converts them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MachineSpec {
    pub pes: u64,
    pub peak_flops_per_cycle: f64,
    pub mem_read_words_per_cycle: f64,
    pub mem_write_words_per_cycle: f64,
    /// Words per cycle on the link between a PE and its router.
    pub link_words_per_cycle: f64,
    pub clock_hz: f64,
}

impl MachineSpec {
    /// 32-bit figures of the second-generation wafer: one FMA per cycle,
    /// four loads and two stores per cycle, one word per cycle on the ramp.
    pub fn wse2(pes: u64, clock_hz: f64) -> Self {
        MachineSpec {
            pes,
            peak_flops_per_cycle: 2.0,
            mem_read_words_per_cycle: 4.0,
            mem_write_words_per_cycle: 2.0,
            link_words_per_cycle: 1.0,
            clock_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.pes as f64,
            self.peak_flops_per_cycle,
            self.mem_read_words_per_cycle,
            self.mem_write_words_per_cycle,
            self.link_words_per_cycle,
            self.clock_hz,
        ];
        if fields.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("machine parameters must be positive: {self:?}")))
        }
    }

    /// Peak FLOP/s of one PE.
    pub fn peak(&self) -> f64 {
        self.peak_flops_per_cycle * self.clock_hz
    }

    /// Bytes per second one PE can move on `resource`.
    pub fn bandwidth(&self, resource: Resource) -> f64 {
        let words = match resource {
            Resource::Memory => self.mem_read_words_per_cycle + self.mem_write_words_per_cycle,
            Resource::Fabric => self.link_words_per_cycle,
        };
        words * WORD_BYTES * self.clock_hz
    }

    /// AI at which the bandwidth roof meets the compute roof.
    pub fn ridge(&self, resource: Resource) -> f64 {
        self.peak() / self.bandwidth(resource)
    }
}

/// Attainable per-PE FLOP/s and the limiting resource.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attainable {
    pub flops: f64,
    pub bound: Bound,
}

pub fn attainable(spec: &MachineSpec, ai: f64, resource: Resource) -> Attainable {
    attainable_with(spec.peak(), spec.bandwidth(resource), ai, resource)
}

fn attainable_with(peak: f64, bandwidth: f64, ai: f64, resource: Resource) -> Attainable {
    let roof = ai * bandwidth;
    if roof >= peak {
        Attainable {
            flops: peak,
            bound: Bound::Compute,
        }
    } else {
        Attainable {
            flops: roof.max(0.0),
            bound: resource.into(),
        }
    }
}

/// One dot on a roofline chart.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflinePoint {
    pub label: String,
    pub resource: Resource,
    /// FLOP per byte.
    pub ai: f64,
    /// Achieved FLOP/s per PE.
    pub flops: f64,
    pub bound: Bound,
}

/// Memory and fabric points for a measured per-PE FLOP rate.
pub fn roofline_points(mix: &InstructionMix, spec: &MachineSpec, b: f64, achieved_per_pe: f64) -> Vec<RooflinePoint> {
    [Resource::Memory, Resource::Fabric]
        .into_iter()
        .map(|r| {
            let ai = arithmetic_intensity(mix, r, b);
            let roof = attainable(spec, ai, r);
            RooflinePoint {
                label: r.name().to_string(),
                resource: r,
                ai,
                flops: achieved_per_pe.min(roof.flops),
                bound: roof.bound,
            }
        })
        .collect()
}

/// Billions of cell updates per second.
pub fn throughput(nx: u64, ny: u64, nz: u64, steps: u64, wall_time_s: f64) -> f64 {
    (nx * ny * nz) as f64 * steps as f64 / wall_time_s / 1e9
}

/// Total FLOP/s for a throughput in Gcell/s.
pub fn flop_rate(gcells: f64, flop_per_cell: u32) -> f64 {
    gcells * 1e9 * flop_per_cell as f64
}

pub fn flop_rate_per_pe(total: f64, pes: u64) -> f64 {
    total / pes as f64
}

/// One measured run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub nx: u64,
    pub ny: u64,
    pub nz: u64,
    pub steps: u64,
    pub time_s: f64,
    /// Throughput listed with the measurement, 0 if none.
    #[serde(default)]
    pub gcells: f64,
}

impl RunRow {
    const fn new(nx: u64, ny: u64, time_s: f64, gcells: f64) -> Self {
        RunRow {
            nx,
            ny,
            nz: 1000,
            steps: 1000,
            time_s,
            gcells,
        }
    }

    pub fn label(&self) -> String {
        format!("{}x{}x{}", self.nx, self.ny, self.nz)
    }

    pub fn throughput(&self) -> f64 {
        throughput(self.nx, self.ny, self.nz, self.steps, self.time_s)
    }
}

/// Weak-scaling runs: 1000 steps, nz = 1000, one PE per (x, y) column.
pub const WEAK_SCALING: [RunRow; 8] = [
    RunRow::new(200, 200, 0.0750, 533.64),
    RunRow::new(400, 400, 0.0763, 2097.60),
    RunRow::new(600, 600, 0.0761, 4731.53),
    RunRow::new(755, 500, 0.0762, 4956.17),
    RunRow::new(755, 600, 0.0762, 5945.40),
    RunRow::new(755, 900, 0.0762, 8922.08),
    RunRow::new(755, 990, 0.0764, 9782.14),
    RunRow::new(755, 994, 0.0761, 9862.78),
];

/// Column-height sweep on the 755 x 994 fabric, 100000 steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockRow {
    pub nz: u64,
    pub b: u64,
    pub gcells: f64,
    pub time_s: f64,
    /// Time relative to the nz = 100 run.
    pub scaling: f64,
}

pub const BLOCK_SWEEP_STEPS: u64 = 100_000;
pub const BLOCK_SWEEP_FABRIC: (u64, u64) = (755, 994);

pub const BLOCK_SWEEP: [BlockRow; 7] = [
    BlockRow { nz: 100, b: 100, gcells: 8688.76, time_s: 0.8637, scaling: 1.0000 },
    BlockRow { nz: 200, b: 200, gcells: 9303.26, time_s: 1.6133, scaling: 1.8679 },
    BlockRow { nz: 300, b: 300, gcells: 9492.89, time_s: 2.3716, scaling: 2.7458 },
    BlockRow { nz: 400, b: 400, gcells: 9614.15, time_s: 3.1223, scaling: 3.6151 },
    BlockRow { nz: 500, b: 250, gcells: 9786.51, time_s: 3.8342, scaling: 4.4392 },
    BlockRow { nz: 700, b: 350, gcells: 9885.04, time_s: 5.3143, scaling: 6.1531 },
    BlockRow { nz: 1000, b: 334, gcells: 9936.79, time_s: 7.5524, scaling: 8.7442 },
];

impl BlockRow {
    pub fn throughput(&self) -> f64 {
        let (nx, ny) = BLOCK_SWEEP_FABRIC;
        throughput(nx, ny, self.nz, BLOCK_SWEEP_STEPS, self.time_s)
    }
}

/// `reference_time / row_time` for every row; all rows must share nz and steps.
pub fn weak_scaling_efficiency(rows: &[RunRow], reference: &RunRow) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            if r.nz != reference.nz || r.steps != reference.steps {
                return Err(Error::MismatchedRows {
                    ref_nz: reference.nz,
                    ref_steps: reference.steps,
                    nz: r.nz,
                    steps: r.steps,
                });
            }
            Ok(reference.time_s / r.time_s)
        })
        .collect()
}

/// `label,ai,flops,bound` lines.
pub fn points_csv(points: &[RooflinePoint]) -> String {
    let mut out = String::from("label,ai,flops,bound\n");
    for p in points {
        out += &format!("{},{:.6},{:.6e},{}\n", p.label, p.ai, p.flops, p.bound.label());
    }
    out
}

/// Gnuplot data for one roofline chart. Block 0 holds the roof sampled on a
/// log grid of AI (`ai attainable`), block 1 the measured points.
pub fn roofline_dat(spec: &MachineSpec, resource: Resource, points: &[RooflinePoint]) -> String {
    let mut out = format!(
        "# {} roofline: peak {:.6e} FLOP/s, bandwidth {:.6e} B/s per PE\n# ai[FLOP/B] attainable[FLOP/s]\n",
        resource.name(),
        spec.peak(),
        spec.bandwidth(resource)
    );
    for i in 0..=60 {
        let ai = 10f64.powf(-3.0 + 5.0 * i as f64 / 60.0);
        out += &format!("{:.6e} {:.6e}\n", ai, attainable(spec, ai, resource).flops);
    }
    out += "\n\n# ai[FLOP/B] achieved[FLOP/s] label\n";
    for p in points.iter().filter(|p| p.resource == resource) {
        out += &format!("{:.6e} {:.6e} {}\n", p.ai, p.flops, p.label);
    }
    out
}

/// Everything the perf model derives from the measured tables.
#[derive(Debug, Clone, Serialize)]
pub struct PerfReport {
    pub machine: MachineSpec,
    pub required_flop_per_cell: u32,
    pub executed_flop_per_cell: u32,
    pub memory_words_per_cell_limit: f64,
    pub memory_words_per_cell_table_limit: f64,
    pub fabric_words_per_cell: f64,
    pub ai_memory_flop_per_byte: f64,
    pub ai_fabric_flop_per_byte: f64,
    pub total_tflop_per_s: f64,
    pub per_pe_mflop_per_s: f64,
    pub points: Vec<RooflinePoint>,
    pub weak_scaling: Vec<ReportRow>,
    pub block_sweep: Vec<ReportRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub time_s: f64,
    pub gcells_per_s: f64,
    pub gcells_per_s_listed: Option<f64>,
    pub relative_error: Option<f64>,
    /// Weak-scaling efficiency against the reference row, or memory AI at the row's block length.
    pub extra: f64,
}

/// Builds the report from `rows`, using `rows[reference]` for weak scaling
/// and the last row for the FLOP figures.
pub fn perf_report(spec: &MachineSpec, rows: &[RunRow], reference: usize) -> Result<PerfReport> {
    spec.validate()?;
    let mix = InstructionMix::wse2();
    let reference = rows
        .get(reference)
        .ok_or_else(|| Error::Config(format!("reference row {reference} out of range")))?;
    let last = rows.last().ok_or_else(|| Error::Config("no rows".into()))?;
    let efficiency = weak_scaling_efficiency(rows, reference)?;
    let total = flop_rate(last.throughput(), mix.required_flops());
    let per_pe = flop_rate_per_pe(total, last.nx * last.ny);
    let row = |label: String, time_s: f64, got: f64, listed: f64, extra: f64| ReportRow {
        label,
        time_s,
        gcells_per_s: got,
        gcells_per_s_listed: (listed > 0.0).then_some(listed),
        relative_error: (listed > 0.0).then(|| (got - listed).abs() / listed),
        extra,
    };
    Ok(PerfReport {
        machine: *spec,
        required_flop_per_cell: mix.required_flops(),
        executed_flop_per_cell: mix.executed_flops(),
        memory_words_per_cell_limit: mix.memory_words(f64::INFINITY),
        memory_words_per_cell_table_limit: InstructionMix::table().memory_words(f64::INFINITY),
        fabric_words_per_cell: mix.fabric_words(),
        ai_memory_flop_per_byte: arithmetic_intensity(&mix, Resource::Memory, f64::INFINITY),
        ai_fabric_flop_per_byte: arithmetic_intensity(&mix, Resource::Fabric, f64::INFINITY),
        total_tflop_per_s: total / 1e12,
        per_pe_mflop_per_s: per_pe / 1e6,
        points: roofline_points(&mix, spec, f64::INFINITY, per_pe),
        weak_scaling: rows
            .iter()
            .zip(&efficiency)
            .map(|(r, e)| row(r.label(), r.time_s, r.throughput(), r.gcells, *e))
            .collect(),
        block_sweep: BLOCK_SWEEP
            .iter()
            .map(|r| {
                let ai = arithmetic_intensity(&mix, Resource::Memory, r.b as f64);
                row(format!("nz={} b={}", r.nz, r.b), r.time_s, r.throughput(), r.gcells, ai)
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_counts() {
        let mix = InstructionMix::wse2();
        assert_eq!(mix.required_flops(), 51);
        assert_eq!(mix.executed_flops(), 57);
        assert_eq!(InstructionMix::table().required_flops(), 51);
    }

    #[test]
    fn word_counts() {
        let table = InstructionMix::table();
        assert_eq!(table.memory_words(f64::INFINITY), 95.0);
        assert_eq!(table.memory_words(1.0), 120.0);
        let mix = InstructionMix::wse2();
        assert_eq!(mix.memory_words(f64::INFINITY), 112.0);
        assert_eq!(mix.memory_words(25.0), 113.0);
        assert_eq!(mix.fabric_words(), 17.0);
    }

    #[test]
    fn intensities() {
        let mix = InstructionMix::wse2();
        assert_eq!(arithmetic_intensity(&mix, Resource::Fabric, 1.0), 0.75);
        let mem = arithmetic_intensity(&mix, Resource::Memory, f64::INFINITY);
        assert!((mem - 51.0 / 448.0).abs() < 1e-15);
        let flat = InstructionMix {
            ops: vec![OpClass {
                name: "op",
                count: 3,
                flops: 1,
                loads: 1.0,
                loads_per_block: 0.0,
                stores: 0.0,
                fabric_loads: 1.0,
            }],
            extra_flops: 0,
        };
        assert_eq!(arithmetic_intensity(&flat, Resource::Memory, 1.0), 0.25);
    }

    #[test]
    fn roofline_rules() {
        let spec = MachineSpec::wse2(1, 1e9);
        assert_eq!(attainable(&spec, f64::INFINITY, Resource::Memory).flops, spec.peak());
        assert_eq!(attainable(&spec, 1e9, Resource::Fabric).bound, Bound::Compute);
        let starved = attainable_with(2e9, 0.0, 0.5, Resource::Memory);
        assert_eq!((starved.flops, starved.bound), (0.0, Bound::Memory));
        let low = attainable(&spec, 0.01, Resource::Fabric);
        assert_eq!(low.bound, Bound::Fabric);
        assert!((low.flops - 0.01 * 4e9).abs() < 1e-3);
    }

    #[test]
    fn throughput_rows() {
        assert!((throughput(1, 1, 1, 1, 1.0) - 1e-9).abs() < 1e-24);
        for r in WEAK_SCALING.iter() {
            assert!((r.throughput() - r.gcells).abs() / r.gcells < 5e-3, "{}", r.label());
        }
        for r in BLOCK_SWEEP.iter() {
            assert!((r.throughput() - r.gcells).abs() / r.gcells < 5e-3, "nz {}", r.nz);
        }
    }

    #[test]
    fn flop_figures() {
        assert_eq!(flop_rate(0.0, 51), 0.0);
        let total = flop_rate(9862.78, 51);
        assert!((total / 503e12 - 1.0).abs() < 0.01);
        assert!((flop_rate_per_pe(total, 755 * 994) / 670.3e6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn weak_scaling() {
        let e = weak_scaling_efficiency(&WEAK_SCALING, &WEAK_SCALING[0]).unwrap();
        assert_eq!(e[0], 1.0);
        assert!((e[2] - 0.0750 / 0.0761).abs() < 1e-15);
        let mut odd = WEAK_SCALING[1];
        odd.steps = 10;
        assert!(matches!(
            weak_scaling_efficiency(&[odd], &WEAK_SCALING[0]),
            Err(Error::MismatchedRows { .. })
        ));
    }

    #[test]
    fn outputs() {
        let spec = MachineSpec::wse2(755 * 994, 1e9);
        let report = perf_report(&spec, &WEAK_SCALING, 0).unwrap();
        assert_eq!(report.points.len(), 2);
        let csv = points_csv(&report.points);
        assert!(csv.starts_with("label,ai,flops,bound\nmemory,0.113839,"));
        let dat = roofline_dat(&spec, Resource::Fabric, &report.points);
        assert_eq!(dat.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).count(), 62);
        assert!(MachineSpec { clock_hz: 0.0, ..spec }.validate().is_err());
    }
}
