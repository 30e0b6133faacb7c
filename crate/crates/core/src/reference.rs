//! Sequential solver for the constant-density acoustic wave equation.
//!
//! Time is discretized with the second-order leapfrog scheme
//! `u[n+1] = 2 u[n] + dt² V² ∇²u[n] − u[n−1]` and space with the 8th-order
//! 25-point star stencil. Cells outside the grid read as zero. This solver is
//! the ground truth every distributed result is compared against.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Courant number above which [`run`] logs a stability warning.
pub const DEFAULT_COURANT_WARNING: f64 = 0.5;

/// Stencil half-width along each axis.
pub const RADIUS: usize = 4;

/// Central second-derivative weights of order 8, as exact fractions `(num, den)`
/// for `m = 0..=4`.
pub const ORDER8_WEIGHTS: [(i64, i64); 5] = [(-205, 72), (8, 5), (-1, 5), (8, 315), (-1, 560)];

/// A regular 3D grid. Storage order is x-fastest: `i + nx * (j + ny * k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Grid3D {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let grid = Grid3D {
            nx,
            ny,
            nz,
            dx,
            dy,
            dz,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with the same spacing `h` along all three axes.
    pub fn uniform(nx: usize, ny: usize, nz: usize, h: f64) -> Result<Self> {
        Self::new(nx, ny, nz, h, h, h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        for (name, h) in [("dx", self.dx), ("dy", self.dy), ("dz", self.dz)] {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {h}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    pub fn min_spacing(&self) -> f64 {
        self.dx.min(self.dy).min(self.dz)
    }
}

/// Per-axis weights `c[m]`, `m = 0..=4`, already divided by the squared
/// spacing (units 1/m²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StencilCoefficients {
    pub cx: [f64; 5],
    pub cy: [f64; 5],
    pub cz: [f64; 5],
}

impl StencilCoefficients {
    /// Builds a coefficient set, checking that each axis annihilates constants:
    /// `c[0] + 2 (c[1] + c[2] + c[3] + c[4]) = 0` to 1e-12 relative.
    pub fn new(cx: [f64; 5], cy: [f64; 5], cz: [f64; 5]) -> Result<Self> {
        for (axis, c) in [("x", &cx), ("y", &cy), ("z", &cz)] {
            let sum = c[0] + 2.0 * (c[1] + c[2] + c[3] + c[4]);
            let scale = c.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if !c.iter().all(|v| v.is_finite()) || sum.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::Config(format!(
                    "{axis} coefficients do not annihilate constants (residual {sum:e})"
                )));
            }
        }
        Ok(StencilCoefficients { cx, cy, cz })
    }

    /// Scales a dimensionless weight table by `1/h²` per axis.
    pub fn from_table(grid: &Grid3D, table: [f64; 5]) -> Result<Self> {
        let axis = |h: f64| table.map(|w| w / (h * h));
        Self::new(axis(grid.dx), axis(grid.dy), axis(grid.dz))
    }

    /// Combined center weight `cx[0] + cy[0] + cz[0]`.
    pub fn center(&self) -> f64 {
        self.cx[0] + self.cy[0] + self.cz[0]
    }

    /// Returns a copy with every coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        StencilCoefficients {
            cx: self.cx.map(|c| c * factor),
            cy: self.cy.map(|c| c * factor),
            cz: self.cz.map(|c| c * factor),
        }
    }
}

/// Standard central-difference coefficients for the given (even) order.
pub fn make_coefficients(grid: &Grid3D, order: u32) -> Result<StencilCoefficients> {
    if order != 8 {
        return Err(Error::UnsupportedOrder(order));
    }
    let table = ORDER8_WEIGHTS.map(|(n, d)| n as f64 / d as f64);
    StencilCoefficients::from_table(grid, table)
}

/// Velocity model sampled on the grid, in m/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarthModel {
    velocity: Vec<f64>,
}

impl EarthModel {
    pub fn new(grid: &Grid3D, velocity: Vec<f64>) -> Result<Self> {
        if velocity.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: velocity.len(),
            });
        }
        if let Some(v) = velocity.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("velocity must be positive, got {v}")));
        }
        Ok(EarthModel { velocity })
    }

    pub fn constant(grid: &Grid3D, v: f64) -> Result<Self> {
        Self::new(grid, vec![v; grid.len()])
    }

    /// Builds a model from a function of cell coordinates.
    pub fn from_fn(grid: &Grid3D, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut velocity = Vec::with_capacity(grid.len());
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    velocity.push(f(i, j, k));
                }
            }
        }
        Self::new(grid, velocity)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.velocity
    }

    pub fn at(&self, grid: &Grid3D, i: usize, j: usize, k: usize) -> f64 {
        self.velocity[grid.index(i, j, k)]
    }

    pub fn max(&self) -> f64 {
        self.velocity.iter().copied().fold(0.0, f64::max)
    }

    /// True when the velocity only depends on (x, y).
    pub fn is_column_constant(&self, grid: &Grid3D) -> bool {
        let plane = grid.nx * grid.ny;
        (1..grid.nz).all(|k| self.velocity[k * plane..(k + 1) * plane] == self.velocity[..plane])
    }
}

/// Point source: a trace of amplitudes `f[n]` injected at one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTerm {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    /// `trace[n - 1]` is the amplitude used at step `n`.
    pub trace: Vec<f64>,
}

impl SourceTerm {
    /// Ricker wavelet sampled at `t = n dt` for `n = 1..=steps`, delayed by
    /// one period so that it starts close to zero.
    pub fn ricker(x: usize, y: usize, z: usize, peak_hz: f64, amplitude: f64, dt: f64, steps: usize) -> Self {
        let delay = 1.0 / peak_hz;
        let trace = (1..=steps)
            .map(|n| amplitude * ricker(peak_hz, n as f64 * dt - delay))
            .collect();
        SourceTerm { x, y, z, trace }
    }

    pub fn silent(x: usize, y: usize, z: usize, steps: usize) -> Self {
        SourceTerm {
            x,
            y,
            z,
            trace: vec![0.0; steps],
        }
    }

    pub fn amplitude(&self, n: usize) -> f64 {
        self.trace[n - 1]
    }
}

/// Ricker wavelet `(1 − 2π²f²t²) exp(−π²f²t²)`.
pub fn ricker(peak_hz: f64, t: f64) -> f64 {
    let a = (std::f64::consts::PI * peak_hz * t).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

/// Two time levels of the wavefield in 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavefield {
    pub grid: Grid3D,
    pub curr: Vec<f32>,
    pub prev: Vec<f32>,
}

impl Wavefield {
    pub fn zeros(grid: &Grid3D) -> Self {
        Wavefield {
            grid: *grid,
            curr: vec![0.0; grid.len()],
            prev: vec![0.0; grid.len()],
        }
    }

    pub fn energy(&self) -> f64 {
        self.curr.iter().map(|&u| (u as f64) * (u as f64)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.curr.iter().fold(0.0f32, |m, u| m.max(u.abs()))
    }
}

/// Everything needed to run a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub grid: Grid3D,
    pub model: EarthModel,
    pub source: SourceTerm,
    /// Courant number above which a warning is logged.
    pub courant_warning: f64,
}

impl SimConfig {
    pub fn new(dt: f64, steps: usize, grid: Grid3D, model: EarthModel, source: SourceTerm) -> Result<Self> {
        let cfg = SimConfig {
            dt,
            steps,
            grid,
            model,
            source,
            courant_warning: DEFAULT_COURANT_WARNING,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.model.as_slice().len() != self.grid.len() {
            return Err(Error::LengthMismatch {
                expected: self.grid.len(),
                actual: self.model.as_slice().len(),
            });
        }
        let s = &self.source;
        if s.x >= self.grid.nx || s.y >= self.grid.ny || s.z >= self.grid.nz {
            return Err(Error::Config(format!(
                "source ({}, {}, {}) outside {}x{}x{} grid",
                s.x, s.y, s.z, self.grid.nx, self.grid.ny, self.grid.nz
            )));
        }
        if s.trace.len() < self.steps {
            return Err(Error::Config(format!(
                "source trace has {} samples for {} steps",
                s.trace.len(),
                self.steps
            )));
        }
        Ok(())
    }

    /// `dt V_max sqrt(3) / min(h)`.
    pub fn courant_number(&self) -> f64 {
        self.dt * self.model.max() * 3f64.sqrt() / self.grid.min_spacing()
    }

    /// `dt² V²` at a cell, rounded once to 32 bits.
    pub fn velocity_scale(&self, i: usize, j: usize, k: usize) -> f32 {
        let v = self.model.at(&self.grid, i, j, k);
        (self.dt * self.dt * v * v) as f32
    }

    /// Amount added at the source cell on step `n`: `dt² V(src)² f[n]`.
    pub fn source_increment(&self, n: usize) -> f32 {
        let s = &self.source;
        let v = self.model.at(&self.grid, s.x, s.y, s.z);
        (self.dt * self.dt * v * v * s.amplitude(n)) as f32
    }
}

/// 25-point Laplacian at `(i, j, k)` with zero padding outside the grid.
///
/// The center term `(cx0 + cy0 + cz0) u` is added first, then for each
/// distance `m = 1..=4` the x, y and z pairs in that order.
pub fn laplacian<T: Float>(field: &[T], grid: &Grid3D, coeffs: &StencilCoefficients, i: usize, j: usize, k: usize) -> T {
    let at = |ii: isize, jj: isize, kk: isize| -> T {
        if ii < 0 || jj < 0 || kk < 0 {
            return T::zero();
        }
        let (ii, jj, kk) = (ii as usize, jj as usize, kk as usize);
        if ii >= grid.nx || jj >= grid.ny || kk >= grid.nz {
            T::zero()
        } else {
            field[grid.index(ii, jj, kk)]
        }
    };
    let c = |v: f64| T::from(v).unwrap();
    let (i, j, k) = (i as isize, j as isize, k as isize);
    let mut acc = c(coeffs.center()) * at(i, j, k);
    for m in 1..=RADIUS {
        let d = m as isize;
        acc = acc + c(coeffs.cx[m]) * (at(i + d, j, k) + at(i - d, j, k));
        acc = acc + c(coeffs.cy[m]) * (at(i, j + d, k) + at(i, j - d, k));
        acc = acc + c(coeffs.cz[m]) * (at(i, j, k + d) + at(i, j, k - d));
    }
    acc
}

/// Advances the wavefield by one step (step index `n`, 1-based).
pub fn step(wf: &Wavefield, cfg: &SimConfig, coeffs: &StencilCoefficients, n: usize) -> Result<Wavefield> {
    if n == 0 || n > cfg.source.trace.len() {
        return Err(Error::Config(format!("step index {n} outside 1..={}", cfg.source.trace.len())));
    }
    let grid = &cfg.grid;
    let mut next = vec![0.0f32; grid.len()];
    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let idx = grid.index(i, j, k);
                let lap = laplacian(&wf.curr, grid, coeffs, i, j, k);
                next[idx] = 2.0 * wf.curr[idx] + cfg.velocity_scale(i, j, k) * lap - wf.prev[idx];
            }
        }
    }
    let s = &cfg.source;
    next[grid.index(s.x, s.y, s.z)] += cfg.source_increment(n);
    if let Some(idx) = next.iter().position(|v| !v.is_finite()) {
        let (i, rest) = (idx % grid.nx, idx / grid.nx);
        return Err(Error::Instability {
            step: n,
            i,
            j: rest % grid.ny,
            k: rest / grid.ny,
        });
    }
    Ok(Wavefield {
        grid: *grid,
        curr: next,
        prev: wf.curr.clone(),
    })
}

/// Continues a run: applies steps `first..first + count`.
pub fn resume(mut wf: Wavefield, cfg: &SimConfig, coeffs: &StencilCoefficients, first: usize, count: usize) -> Result<Wavefield> {
    for n in first..first + count {
        wf = step(&wf, cfg, coeffs, n)?;
    }
    Ok(wf)
}

/// Runs `cfg.steps` steps from a zero wavefield with 8th-order coefficients.
pub fn run(cfg: &SimConfig) -> Result<Wavefield> {
    cfg.validate()?;
    let courant = cfg.courant_number();
    if courant > cfg.courant_warning {
        log::warn!(
            "Courant number {courant:.3} exceeds {:.3}; the run may be unstable",
            cfg.courant_warning
        );
    }
    let coeffs = make_coefficients(&cfg.grid, 8)?;
    resume(Wavefield::zeros(&cfg.grid), cfg, &coeffs, 1, cfg.steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Grid3D {
        Grid3D::uniform(n, n, n, 1.0).unwrap()
    }

    #[test]
    fn order8_weights_unit_spacing() {
        let c = make_coefficients(&unit_grid(4), 8).unwrap();
        assert_eq!(c.cx[1], 1.6);
        assert_eq!(c.cy[2], -0.2);
    }

    #[test]
    fn weights_reproduce_second_derivative_of_x_squared() {
        // Exact rational arithmetic: sum_m w_m ((m)² + (−m)²) over the common
        // denominator must equal 2.
        let den: i64 = 72 * 5 * 315 * 560;
        let num: i64 = ORDER8_WEIGHTS
            .iter()
            .enumerate()
            .skip(1)
            .map(|(m, (n, d))| n * (den / d) * 2 * (m as i64).pow(2))
            .sum();
        assert_eq!(num, 2 * den);
        let c = make_coefficients(&unit_grid(9), 8).unwrap();
        let field: Vec<f64> = (0..9).map(|x| ((x as f64) - 4.0).powi(2)).collect();
        let d2: f64 = c.cx[0] * field[4] + (1..=4).map(|m| c.cx[m] * (field[4 + m] + field[4 - m])).sum::<f64>();
        assert!((d2 - 2.0).abs() < 1e-12, "{d2}");
    }

    #[test]
    fn weights_annihilate_constants_and_scale() {
        let g = Grid3D::new(3, 3, 3, 0.5, 2.0, 1.0).unwrap();
        let c = make_coefficients(&g, 8).unwrap();
        let unit = make_coefficients(&unit_grid(3), 8).unwrap();
        for m in 0..5 {
            assert_eq!(c.cx[m], 4.0 * unit.cx[m]);
            assert_eq!(c.cy[m], 0.25 * unit.cy[m]);
        }
        for axis in [c.cx, c.cy, c.cz] {
            let s = axis[0] + 2.0 * (axis[1] + axis[2] + axis[3] + axis[4]);
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_other_orders() {
        assert!(matches!(make_coefficients(&unit_grid(2), 4), Err(Error::UnsupportedOrder(4))));
        assert!(make_coefficients(&unit_grid(2), 10).is_err());
    }

    #[test]
    fn rejects_inconsistent_coefficients() {
        let bad = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!(StencilCoefficients::new(bad, bad, bad).is_err());
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let g = unit_grid(12);
        let c = make_coefficients(&g, 8).unwrap();
        let u = vec![7.0f32; g.len()];
        assert!(laplacian(&u, &g, &c, 6, 6, 6).abs() < 1e-4);
    }

    #[test]
    fn laplacian_of_spike_is_center_weight() {
        let g = unit_grid(9);
        let c = make_coefficients(&g, 8).unwrap();
        let mut u = vec![0.0f32; g.len()];
        u[g.index(4, 4, 4)] = 1.0;
        assert_eq!(laplacian(&u, &g, &c, 4, 4, 4), c.center() as f32);
    }

    #[test]
    fn first_step_puts_scaled_source_at_one_cell() {
        let g = Grid3D::uniform(6, 5, 4, 10.0).unwrap();
        let model = EarthModel::constant(&g, 1500.0).unwrap();
        let mut src = SourceTerm::silent(2, 3, 1, 1);
        src.trace[0] = 1.0;
        let cfg = SimConfig::new(1e-3, 1, g, model, src).unwrap();
        let wf = run(&cfg).unwrap();
        let expected = (1e-3f64 * 1e-3 * 1500.0 * 1500.0) as f32;
        for (idx, v) in wf.curr.iter().enumerate() {
            if idx == g.index(2, 3, 1) {
                assert_eq!(*v, expected);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(wf.prev.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_source_stays_zero() {
        let g = Grid3D::uniform(5, 4, 3, 5.0).unwrap();
        let model = EarthModel::constant(&g, 2000.0).unwrap();
        let cfg = SimConfig::new(1e-3, 7, g, model, SourceTerm::silent(1, 1, 1, 7)).unwrap();
        let wf = run(&cfg).unwrap();
        assert!(wf.curr.iter().chain(&wf.prev).all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_zero_steps_and_bad_source() {
        let g = Grid3D::uniform(4, 4, 4, 1.0).unwrap();
        let model = EarthModel::constant(&g, 1.0).unwrap();
        assert!(SimConfig::new(0.1, 0, g, model.clone(), SourceTerm::silent(0, 0, 0, 1)).is_err());
        assert!(SimConfig::new(0.1, 2, g, model.clone(), SourceTerm::silent(0, 0, 0, 1)).is_err());
        assert!(SimConfig::new(0.1, 1, g, model.clone(), SourceTerm::silent(4, 0, 0, 1)).is_err());
        assert!(SimConfig::new(-0.1, 1, g, model, SourceTerm::silent(0, 0, 0, 1)).is_err());
        assert!(Grid3D::uniform(0, 1, 1, 1.0).is_err());
        assert!(Grid3D::new(1, 1, 1, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let g = Grid3D::uniform(8, 8, 8, 1.0).unwrap();
        let model = EarthModel::constant(&g, 1.0).unwrap();
        let mut src = SourceTerm::silent(4, 4, 4, 400);
        src.trace[0] = 1.0;
        // Courant number far above any stable limit.
        let cfg = SimConfig::new(5.0, 400, g, model, src).unwrap();
        assert!(matches!(run(&cfg), Err(Error::Instability { .. })));
    }

    #[test]
    fn column_constant_detection() {
        let g = Grid3D::uniform(3, 2, 4, 1.0).unwrap();
        let cols = EarthModel::from_fn(&g, |i, j, _| 1000.0 + (i + 3 * j) as f64).unwrap();
        assert!(cols.is_column_constant(&g));
        let layered = EarthModel::from_fn(&g, |_, _, k| 1000.0 + k as f64).unwrap();
        assert!(!layered.is_column_constant(&g));
        assert!(EarthModel::constant(&g, -1.0).is_err());
    }
}
