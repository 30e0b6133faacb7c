//! The distributed time loop: X and Y map onto the fabric, Z stays in PE memory.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fabric::{Direction, FabricGrid, LinkDirection, WINDOW};
use crate::reference::{make_coefficients, SimConfig, Wavefield};

use super::column::{inject_source, ColumnCoefficients, PEColumn, Stream};
use super::memory::{select_block_size, BlockPlan, MemoryModel, HALO};

/// Fabric traffic accumulated over the steps run so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CommStats {
    /// Data words PEs pushed onto their ramps.
    pub words_sent: u64,
    /// Data words routers handed to their PEs, zero boundary blocks included.
    pub words_received: u64,
    /// Packets (data and commands) carried over router-to-router links.
    pub link_words: u64,
    /// Simulated fabric cycles spent in broadcasts.
    pub cycles: u64,
    pub broadcasts: u64,
}

/// State of a distributed run on one fabric.
#[derive(Debug)]
pub struct DistributedSolver {
    cfg: SimConfig,
    fabric: FabricGrid,
    plan: BlockPlan,
    columns: Vec<PEColumn>,
    source_pe: usize,
    steps_done: usize,
    stats: CommStats,
    payload: Vec<u32>,
    partials: Vec<f32>,
}

impl DistributedSolver {
    /// Solver with the largest block length that fits the default PE memory.
    pub fn new(cfg: SimConfig, fabric: FabricGrid) -> Result<Self> {
        Self::with_memory(cfg, fabric, MemoryModel::default(), None)
    }

    /// Solver with an explicit memory model and, optionally, a forced block count.
    pub fn with_memory(cfg: SimConfig, mut fabric: FabricGrid, mem: MemoryModel, blocks: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        mem.validate()?;
        let grid = cfg.grid;
        if fabric.width() != grid.nx || fabric.height() != grid.ny {
            return Err(Error::FabricMismatch {
                fabric_w: fabric.width(),
                fabric_h: fabric.height(),
                nx: grid.nx,
                ny: grid.ny,
            });
        }
        if !cfg.model.is_column_constant(&grid) {
            return Err(Error::Config(
                "the distributed engine needs a velocity that is constant along z".into(),
            ));
        }
        for d in Direction::ALL {
            if fabric.colors_of(d).is_none() {
                fabric.install_pattern(d, d.default_colors())?;
            }
        }
        let plan = match blocks {
            Some(k) => BlockPlan::with_blocks(grid.nz, k, &mem)?,
            None => select_block_size(grid.nz, &mem)?,
        };
        let coeffs = make_coefficients(&grid, 8)?;
        let columns = (0..grid.ny)
            .flat_map(|j| (0..grid.nx).map(move |i| (i, j)))
            .map(|(i, j)| {
                let v = cfg.model.at(&grid, i, j, 0);
                let scale = cfg.dt * cfg.dt * v * v;
                PEColumn::new(grid.nz, plan.b, ColumnCoefficients::new(&coeffs, scale), &mem)
            })
            .collect::<Result<Vec<_>>>()?;
        let source_pe = cfg.source.y * grid.nx + cfg.source.x;
        Ok(DistributedSolver {
            cfg,
            fabric,
            plan,
            columns,
            source_pe,
            steps_done: 0,
            stats: CommStats::default(),
            payload: Vec::new(),
            partials: Vec::new(),
        })
    }

    pub fn plan(&self) -> BlockPlan {
        self.plan
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> &FabricGrid {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut FabricGrid {
        &mut self.fabric
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn column(&self, x: usize, y: usize) -> &PEColumn {
        &self.columns[y * self.cfg.grid.nx + x]
    }

    pub fn halos_are_zero(&self) -> bool {
        self.columns.iter().all(PEColumn::halos_are_zero)
    }

    /// Advances one time step; returns the index of the step just taken.
    pub fn step(&mut self) -> Result<usize> {
        let n = self.steps_done + 1;
        if n > self.cfg.steps {
            return Err(Error::Config(format!("all {} steps already taken", self.cfg.steps)));
        }
        let blocks: Vec<_> = self.plan.blocks().collect();
        for (z_b, len) in blocks {
            self.run_block(z_b, len)?;
        }
        for col in &mut self.columns {
            col.advance();
        }
        let src = &self.cfg.source;
        inject_source(&mut self.columns[self.source_pe].curr, src.z, self.cfg.source_increment(n))?;
        self.check_finite(n)?;
        self.steps_done = n;
        Ok(n)
    }

    /// Runs the remaining steps of the configuration.
    pub fn run(&mut self) -> Result<()> {
        while self.steps_done < self.cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    fn run_block(&mut self, z_b: usize, len: usize) -> Result<()> {
        self.payload.clear();
        for col in &mut self.columns {
            let block = col.stage_block(z_b, len);
            self.payload.extend(block.iter().map(|v| v.to_bits()));
        }
        let (ramp_before, links_before) = self.ramp_totals();
        let report = self.fabric.concurrent_broadcasts(len, &self.payload)?;
        let (ramp_after, links_after) = self.ramp_totals();
        self.stats.words_sent += ramp_after.0 - ramp_before.0;
        self.stats.words_received += ramp_after.1 - ramp_before.1;
        self.stats.link_words += links_after - links_before;
        self.stats.cycles += report.cycles;
        self.stats.broadcasts += 1;

        let maps: Vec<_> = Stream::ALL
            .iter()
            .map(|s| {
                let d = s.pattern();
                report
                    .maps
                    .iter()
                    .find(|m| m.direction == d)
                    .expect("all four patterns run together")
            })
            .collect();
        let nx = self.cfg.grid.nx;
        let span = WINDOW * len;
        for (pe, col) in self.columns.iter_mut().enumerate() {
            let (x, y) = (pe % nx, pe / nx);
            for (s, map) in maps.iter().enumerate() {
                let words = map.pe(x, y).words;
                for (dst, w) in col.recv[s][..span].iter_mut().zip(words) {
                    *dst = f32::from_bits(*w);
                }
            }
            col.compute_block(z_b, len, &mut self.partials)?;
        }
        Ok(())
    }

    /// (words into ramps, words out of ramps) and router-to-router packets.
    fn ramp_totals(&self) -> ((u64, u64), u64) {
        let mut ramp = (0, 0);
        for y in 0..self.fabric.height() {
            for x in 0..self.fabric.width() {
                let c = self.fabric.link_counters(x, y)[LinkDirection::Ramp.index()];
                ramp.0 += c.received;
                ramp.1 += c.sent;
            }
        }
        (ramp, self.fabric.words_moved())
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        let nx = self.cfg.grid.nx;
        for (pe, col) in self.columns.iter().enumerate() {
            if let Some(k) = col.interior().iter().position(|v| !v.is_finite()) {
                return Err(Error::Instability {
                    step,
                    i: pe % nx,
                    j: pe / nx,
                    k,
                });
            }
        }
        Ok(())
    }

    /// Gathers the columns into a wavefield laid out like the reference's.
    pub fn wavefield(&self) -> Wavefield {
        let grid = self.cfg.grid;
        let mut wf = Wavefield::zeros(&grid);
        let nx = grid.nx;
        for (pe, col) in self.columns.iter().enumerate() {
            let (i, j) = (pe % nx, pe / nx);
            for k in 0..grid.nz {
                let idx = grid.index(i, j, k);
                wf.curr[idx] = col.curr[HALO + k];
                wf.prev[idx] = col.prev[HALO + k];
            }
        }
        wf
    }
}

/// Runs every step of `cfg` on `fabric` and returns the gathered wavefield.
pub fn run_distributed(cfg: &SimConfig, fabric: FabricGrid) -> Result<Wavefield> {
    let mut solver = DistributedSolver::new(cfg.clone(), fabric)?;
    solver.run()?;
    Ok(solver.wavefield())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{run, EarthModel, Grid3D, SourceTerm};

    fn config(nx: usize, ny: usize, nz: usize, steps: usize) -> SimConfig {
        let grid = Grid3D::uniform(nx, ny, nz, 10.0).unwrap();
        let model = EarthModel::constant(&grid, 1500.0).unwrap();
        let src = SourceTerm::ricker(nx / 2, ny / 2, nz / 2, 25.0, 1.0, 1e-3, steps);
        SimConfig::new(1e-3, steps, grid, model, src).unwrap()
    }

    fn max_rel(a: &[f32], b: &[f32]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn matches_reference_on_a_small_grid() {
        let cfg = config(12, 12, 16, 5);
        let reference = run(&cfg).unwrap();
        let wse = run_distributed(&cfg, FabricGrid::new(12, 12)).unwrap();
        assert!(max_rel(&wse.curr, &reference.curr) <= 1e-4);
        assert!(max_rel(&wse.prev, &reference.prev) <= 1e-4);
    }

    #[test]
    fn single_column_is_a_pure_z_stencil() {
        let cfg = config(1, 1, 24, 8);
        let reference = run(&cfg).unwrap();
        let wse = run_distributed(&cfg, FabricGrid::new(1, 1)).unwrap();
        assert!(max_rel(&wse.curr, &reference.curr) <= 1e-4);
    }

    #[test]
    fn zero_source_stays_zero() {
        let mut cfg = config(6, 5, 10, 4);
        cfg.source = SourceTerm::silent(1, 1, 1, 4);
        let wse = run_distributed(&cfg, FabricGrid::new(6, 5)).unwrap();
        assert!(wse.curr.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn communication_volume_per_step() {
        let cfg = config(5, 4, 30, 2);
        let mem = MemoryModel::default();
        let mut s = DistributedSolver::with_memory(cfg, FabricGrid::new(5, 4), mem, Some(3)).unwrap();
        s.step().unwrap();
        let pes = 20u64;
        let (b, k) = (s.plan().b as u64, s.plan().k as u64);
        assert_eq!(s.stats().words_sent, pes * 4 * b * k);
        assert_eq!(s.stats().words_received, pes * 20 * b * k);
        assert!(s.halos_are_zero());
    }

    #[test]
    fn rejects_mismatch_and_layered_models() {
        let cfg = config(4, 4, 8, 1);
        assert!(matches!(
            DistributedSolver::new(cfg.clone(), FabricGrid::new(4, 3)),
            Err(Error::FabricMismatch { .. })
        ));
        let mut layered = cfg;
        layered.model = EarthModel::from_fn(&layered.grid, |_, _, k| 1500.0 + k as f64).unwrap();
        assert!(matches!(DistributedSolver::new(layered, FabricGrid::new(4, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn no_steps_past_the_end() {
        let mut s = DistributedSolver::new(config(2, 2, 8, 1), FabricGrid::new(2, 2)).unwrap();
        s.run().unwrap();
        assert!(s.step().is_err());
    }
}
