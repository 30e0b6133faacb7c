//! JSON run description shared by both engines and the perf model.
//!
//! ```json
//! {
//!   "grid":   { "nx": 32, "ny": 32, "nz": 64, "dx": 10, "dy": 10, "dz": 10 },
//!   "time":   { "dt": 0.001, "steps": 100 },
//!   "model":  { "kind": "constant", "velocity": 1500 },
//!   "source": { "x": 16, "y": 16, "z": 32, "ricker_peak_hz": 25, "amplitude": 1 },
//!   "fabric": { "memory_bytes": 49152, "blocks": 2 },
//!   "perf":   { "clock_hz": 1e9, "reference_row": 0 }
//! }
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{FabricGrid, DEFAULT_COLOR_BUDGET, DEFAULT_QUEUE_CAPACITY, MAX_QUEUE_CAPACITY};
use crate::perf::{MachineSpec, RunRow, WEAK_SCALING};
use crate::reference::{EarthModel, Grid3D, SimConfig, SourceTerm, DEFAULT_COURANT_WARNING};
use crate::wse::{MemoryModel, CALIBRATED_OVERHEAD_BYTES, PE_MEMORY_BYTES, WORDS_PER_BLOCK_CELL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Grid3D,
    pub time: TimeSection,
    pub model: ModelSection,
    pub source: SourceSection,
    #[serde(default)]
    pub fabric: FabricSection,
    #[serde(default)]
    pub perf: PerfSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    /// Seconds.
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "default_courant")]
    pub courant_warning: f64,
}

fn default_courant() -> f64 {
    DEFAULT_COURANT_WARNING
}

/// Velocity model, in m/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Constant {
        velocity: f64,
    },
    /// `base + dvdx x + dvdy y + dvdz z` with coordinates in meters.
    Linear {
        base: f64,
        #[serde(default)]
        dvdx: f64,
        #[serde(default)]
        dvdy: f64,
        #[serde(default)]
        dvdz: f64,
    },
    /// One uniform draw in `[min, max)` per (x, y) column.
    RandomColumns {
        min: f64,
        max: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    /// Ricker peak frequency in Hz; ignored when `trace` is given.
    #[serde(default = "default_peak")]
    pub ricker_peak_hz: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Explicit amplitudes, one per step.
    #[serde(default)]
    pub trace: Option<Vec<f64>>,
}

fn default_peak() -> f64 {
    25.0
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FabricSection {
    /// PEs along x and y. Both default to the grid extent.
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub memory_bytes: usize,
    pub overhead_bytes: usize,
    pub color_budget: u8,
    pub queue_capacity: usize,
    /// Forces the number of Z blocks instead of picking the largest block.
    pub blocks: Option<usize>,
}

impl Default for FabricSection {
    fn default() -> Self {
        FabricSection {
            width: None,
            height: None,
            memory_bytes: PE_MEMORY_BYTES,
            overhead_bytes: CALIBRATED_OVERHEAD_BYTES,
            color_budget: DEFAULT_COLOR_BUDGET,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            blocks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfSection {
    pub clock_hz: f64,
    /// Measured runs; the weak-scaling table when absent.
    pub rows: Option<Vec<RunRow>>,
    pub reference_row: usize,
}

impl Default for PerfSection {
    fn default() -> Self {
        PerfSection {
            clock_hz: 1e9,
            rows: None,
            reference_row: 0,
        }
    }
}

impl PerfSection {
    pub fn rows(&self) -> Vec<RunRow> {
        self.rows.clone().unwrap_or_else(|| WEAK_SCALING.to_vec())
    }

    /// Machine spec sized to the largest row.
    pub fn machine(&self) -> Result<MachineSpec> {
        let pes = self.rows().iter().map(|r| r.nx * r.ny).max().unwrap_or(1);
        let spec = MachineSpec::wse2(pes, self.clock_hz);
        spec.validate()?;
        Ok(spec)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.grid.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds the solver input. `seed` overrides the model's seed when given.
    pub fn sim_config(&self, seed: Option<u64>) -> Result<SimConfig> {
        let grid = Grid3D::new(self.grid.nx, self.grid.ny, self.grid.nz, self.grid.dx, self.grid.dy, self.grid.dz)?;
        let model = match self.model {
            ModelSection::Constant { velocity } => EarthModel::constant(&grid, velocity)?,
            ModelSection::Linear { base, dvdx, dvdy, dvdz } => EarthModel::from_fn(&grid, |i, j, k| {
                base + dvdx * i as f64 * grid.dx + dvdy * j as f64 * grid.dy + dvdz * k as f64 * grid.dz
            })?,
            ModelSection::RandomColumns { min, max, seed: own } => {
                if !(min > 0.0 && max > min) {
                    return Err(Error::Config(format!("random velocity range [{min}, {max}) is empty or not positive")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(own));
                let plane: Vec<f64> = (0..grid.nx * grid.ny).map(|_| rng.gen_range(min..max)).collect();
                EarthModel::from_fn(&grid, |i, j, _| plane[j * grid.nx + i])?
            }
        };
        let s = &self.source;
        let steps = self.time.steps;
        let source = match &s.trace {
            Some(trace) => SourceTerm {
                x: s.x,
                y: s.y,
                z: s.z,
                trace: trace.clone(),
            },
            None => {
                if !(s.ricker_peak_hz > 0.0) {
                    return Err(Error::Config(format!("Ricker peak frequency must be positive, got {}", s.ricker_peak_hz)));
                }
                SourceTerm::ricker(s.x, s.y, s.z, s.ricker_peak_hz, s.amplitude, self.time.dt, steps)
            }
        };
        let mut cfg = SimConfig::new(self.time.dt, steps, grid, model, source)?;
        cfg.courant_warning = self.time.courant_warning;
        Ok(cfg)
    }

    pub fn memory(&self) -> Result<MemoryModel> {
        let mem = MemoryModel {
            capacity: self.fabric.memory_bytes,
            overhead: self.fabric.overhead_bytes,
            words_per_b: WORDS_PER_BLOCK_CELL,
        };
        mem.validate()?;
        Ok(mem)
    }

    pub fn fabric(&self) -> Result<FabricGrid> {
        let f = &self.fabric;
        let w = f.width.unwrap_or(self.grid.nx);
        let h = f.height.unwrap_or(self.grid.ny);
        if w != self.grid.nx || h != self.grid.ny {
            return Err(Error::FabricMismatch {
                fabric_w: w,
                fabric_h: h,
                nx: self.grid.nx,
                ny: self.grid.ny,
            });
        }
        if !(1..=MAX_QUEUE_CAPACITY).contains(&f.queue_capacity) {
            return Err(Error::Config(format!(
                "queue capacity must be in 1..={MAX_QUEUE_CAPACITY}, got {}",
                f.queue_capacity
            )));
        }
        let mut grid = FabricGrid::with_limits(w, h, f.color_budget, f.queue_capacity);
        for d in crate::fabric::Direction::ALL {
            grid.install_pattern(d, d.default_colors())?;
        }
        Ok(grid)
    }
}
