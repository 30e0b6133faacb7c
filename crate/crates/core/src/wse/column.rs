//! Per-PE state and the vector kernels applied to each block.

use crate::error::{Error, Result};
use crate::fabric::{Direction, WINDOW};
use crate::reference::StencilCoefficients;

use super::memory::{MemoryModel, HALO};

/// Side of the PE an incoming stream arrives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    West,
    East,
    North,
    South,
}

impl Stream {
    /// Reduction order.
    pub const ALL: [Stream; 4] = [Stream::West, Stream::East, Stream::North, Stream::South];

    /// Broadcast pattern that delivers this stream.
    pub fn pattern(self) -> Direction {
        match self {
            Stream::West => Direction::East,
            Stream::East => Direction::West,
            Stream::North => Direction::South,
            Stream::South => Direction::North,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Coefficient vectors of one PE, pre-scaled by its `dt² V²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnCoefficients {
    /// Per stream, per receive slot (farthest first, own block last).
    pub streams: [[f32; WINDOW]; 4],
    /// Z weights for offsets 0..=8 around the block; offset 4 is never used.
    pub z: [f32; 9],
}

impl ColumnCoefficients {
    /// The own-block weight on the West stream is `(cx0 + cy0 + cz0) s + 2`,
    /// which folds the `2 u` term of the time update into the stencil. The
    /// other streams weight their own-block copy by zero.
    pub fn new(coeffs: &StencilCoefficients, scale: f64) -> Self {
        let axis = |c: &[f64; 5], own: f32| {
            [
                (c[4] * scale) as f32,
                (c[3] * scale) as f32,
                (c[2] * scale) as f32,
                (c[1] * scale) as f32,
                own,
            ]
        };
        let center = (coeffs.center() * scale + 2.0) as f32;
        let cz = |m: usize| (coeffs.cz[m] * scale) as f32;
        ColumnCoefficients {
            streams: [
                axis(&coeffs.cx, center),
                axis(&coeffs.cx, 0.0),
                axis(&coeffs.cy, 0.0),
                axis(&coeffs.cy, 0.0),
            ],
            z: [cz(4), cz(3), cz(2), cz(1), 0.0, cz(1), cz(2), cz(3), cz(4)],
        }
    }
}

/// Multiplies the `5 b` words received on one stream by the slot weights.
pub fn fmul_incoming(stream: Stream, incoming: &[f32], coeffs: &ColumnCoefficients, out: &mut [f32]) -> Result<()> {
    if incoming.len() % WINDOW != 0 {
        return Err(Error::LengthMismatch {
            expected: incoming.len().next_multiple_of(WINDOW),
            actual: incoming.len(),
        });
    }
    if out.len() != incoming.len() {
        return Err(Error::LengthMismatch {
            expected: incoming.len(),
            actual: out.len(),
        });
    }
    let b = incoming.len() / WINDOW;
    let weights = &coeffs.streams[stream.index()];
    for (slot, w) in weights.iter().enumerate() {
        let range = slot * b..(slot + 1) * b;
        for (o, v) in out[range.clone()].iter_mut().zip(&incoming[range]) {
            *o = v * w;
        }
    }
    Ok(())
}

/// Sums the `4 x 5` partial blocks (stream-major in [`Stream::ALL`] order,
/// then by slot) into one accumulator of `b` cells.
pub fn reduce_accumulator(partials: &[f32], acc: &mut [f32]) -> Result<()> {
    let b = acc.len();
    if partials.len() != 4 * WINDOW * b {
        return Err(Error::LengthMismatch {
            expected: 4 * WINDOW * b,
            actual: partials.len(),
        });
    }
    acc.fill(0.0);
    for block in partials.chunks_exact(b) {
        for (a, p) in acc.iter_mut().zip(block) {
            *a += p;
        }
    }
    Ok(())
}

/// Adds the eight off-center Z terms: `acc[t] += column[z_b + t + off] * z[off]`
/// for `off` in `{0, 1, 2, 3, 5, 6, 7, 8}`, as fused multiply-adds. `column`
/// includes the halo, so offset 4 lines up with cell `z_b + t`.
pub fn z_update(acc: &mut [f32], column: &[f32], z: &[f32; 9], z_b: usize) -> Result<()> {
    let end = z_b + acc.len() + 2 * HALO;
    if end > column.len() {
        return Err(Error::BlockOutOfBounds {
            start: z_b,
            end: z_b + acc.len(),
            len: column.len().saturating_sub(2 * HALO),
        });
    }
    for off in (0..9).filter(|&o| o != HALO) {
        let src = &column[z_b + off..z_b + off + acc.len()];
        for (a, u) in acc.iter_mut().zip(src) {
            *a = u.mul_add(z[off], *a);
        }
    }
    Ok(())
}

/// `next[t] = acc[t] - prev[t]`.
pub fn time_update(acc: &[f32], prev: &[f32]) -> Result<Vec<f32>> {
    if acc.len() != prev.len() {
        return Err(Error::LengthMismatch {
            expected: acc.len(),
            actual: prev.len(),
        });
    }
    Ok(acc.iter().zip(prev).map(|(a, p)| a - p).collect())
}

/// Adds `value` to cell `src_z` of a halo-padded column.
pub fn inject_source(column: &mut [f32], src_z: usize, value: f32) -> Result<()> {
    let nz = column.len().saturating_sub(2 * HALO);
    if src_z >= nz {
        return Err(Error::SourceOutOfRange { src_z, nz });
    }
    column[src_z + HALO] += value;
    Ok(())
}

/// Local memory of one PE: its Z column at two time levels (with zero halos)
/// and the block buffers.
#[derive(Debug, Clone)]
pub struct PEColumn {
    nz: usize,
    pub curr: Vec<f32>,
    pub prev: Vec<f32>,
    pub acc: Vec<f32>,
    pub recv: [Vec<f32>; 4],
    pub send: Vec<f32>,
    pub coeffs: ColumnCoefficients,
}

impl PEColumn {
    pub fn new(nz: usize, b: usize, coeffs: ColumnCoefficients, mem: &MemoryModel) -> Result<Self> {
        if !mem.fits(b, nz) {
            return Err(Error::ColumnTooLarge {
                nz,
                capacity: mem.capacity,
            });
        }
        let len = nz + 2 * HALO;
        Ok(PEColumn {
            nz,
            curr: vec![0.0; len],
            prev: vec![0.0; len],
            acc: vec![0.0; b],
            recv: std::array::from_fn(|_| vec![0.0; WINDOW * b]),
            send: vec![0.0; b],
            coeffs,
        })
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    /// Interior cells of the current time level.
    pub fn interior(&self) -> &[f32] {
        &self.curr[HALO..HALO + self.nz]
    }

    pub fn interior_prev(&self) -> &[f32] {
        &self.prev[HALO..HALO + self.nz]
    }

    pub fn halos_are_zero(&self) -> bool {
        let len = self.nz + 2 * HALO;
        [&self.curr, &self.prev]
            .iter()
            .all(|c| c[..HALO].iter().chain(&c[self.nz + HALO..len]).all(|v| *v == 0.0))
    }

    /// Copies block `[z_b, z_b + len)` of the current level into the send area.
    pub fn stage_block(&mut self, z_b: usize, len: usize) -> &[f32] {
        self.send[..len].copy_from_slice(&self.curr[HALO + z_b..HALO + z_b + len]);
        &self.send[..len]
    }

    /// Runs multiply, reduce, Z update and time update for one block whose
    /// four receive areas (`5 len` words each) are already filled. The new
    /// values overwrite the previous time level in place.
    pub fn compute_block(&mut self, z_b: usize, len: usize, partials: &mut Vec<f32>) -> Result<()> {
        partials.resize(4 * WINDOW * len, 0.0);
        for s in Stream::ALL {
            let span = WINDOW * len;
            let out = &mut partials[s.index() * span..(s.index() + 1) * span];
            fmul_incoming(s, &self.recv[s.index()][..span], &self.coeffs, out)?;
        }
        let acc = &mut self.acc[..len];
        reduce_accumulator(partials, acc)?;
        z_update(acc, &self.curr, &self.coeffs.z, z_b)?;
        let prev = &mut self.prev[HALO + z_b..HALO + z_b + len];
        let next = time_update(acc, prev)?;
        prev.copy_from_slice(&next);
        Ok(())
    }

    /// Swaps time levels after every block of a step has been computed.
    pub fn advance(&mut self) {
        std::mem::swap(&mut self.curr, &mut self.prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{make_coefficients, Grid3D};

    fn unit_coeffs() -> ColumnCoefficients {
        let g = Grid3D::uniform(4, 4, 4, 1.0).unwrap();
        ColumnCoefficients::new(&make_coefficients(&g, 8).unwrap(), 1.0)
    }

    #[test]
    fn fmul_scales_each_slot() {
        let mut c = unit_coeffs();
        c.streams[Stream::East.index()] = [2.0, 0.0, 0.0, 0.0, 0.0];
        let incoming = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut out = [0.0; 15];
        fmul_incoming(Stream::East, &incoming, &c, &mut out).unwrap();
        assert_eq!(&out[..3], &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn own_block_weight_is_zero_except_west() {
        let c = unit_coeffs();
        let mut incoming = vec![0.0; 10];
        incoming[8] = 5.0;
        incoming[9] = 5.0;
        for s in [Stream::East, Stream::North, Stream::South] {
            let mut out = vec![1.0; 10];
            fmul_incoming(s, &incoming, &c, &mut out).unwrap();
            assert_eq!(&out[8..], &[0.0, 0.0]);
        }
        let mut out = vec![0.0; 10];
        let ones = vec![1.0; 10];
        fmul_incoming(Stream::West, &ones, &c, &mut out).unwrap();
        let g = Grid3D::uniform(4, 4, 4, 1.0).unwrap();
        let k = make_coefficients(&g, 8).unwrap();
        assert_eq!(out[9], (k.cx[0] + k.cy[0] + k.cz[0] + 2.0) as f32);
    }

    #[test]
    fn fmul_length_errors() {
        let c = unit_coeffs();
        let mut out = [0.0; 4];
        assert!(fmul_incoming(Stream::West, &[0.0; 4], &c, &mut out).is_err());
        let mut out = [0.0; 4];
        assert!(fmul_incoming(Stream::West, &[0.0; 5], &c, &mut out).is_err());
    }

    #[test]
    fn reduce_zero_and_single_block() {
        let mut acc = [9.0; 3];
        reduce_accumulator(&[0.0; 60], &mut acc).unwrap();
        assert_eq!(acc, [0.0; 3]);
        let mut partials = vec![0.0; 60];
        partials[33..36].copy_from_slice(&[1.5, -2.0, 3.25]);
        reduce_accumulator(&partials, &mut acc).unwrap();
        assert_eq!(acc, [1.5, -2.0, 3.25]);
        assert!(reduce_accumulator(&partials[..59], &mut acc).is_err());
    }

    #[test]
    fn z_update_on_constant_column_gives_minus_center() {
        let g = Grid3D::uniform(4, 4, 4, 1.0).unwrap();
        let k = make_coefficients(&g, 8).unwrap();
        let c = ColumnCoefficients::new(&k, 1.0);
        let column = vec![1.0f32; 20];
        let mut acc = vec![0.0; 4];
        z_update(&mut acc, &column, &c.z, 2).unwrap();
        for a in acc {
            assert!((a as f64 + k.cz[0]).abs() < 1e-6, "{a}");
        }
        let mut acc = vec![3.0; 4];
        z_update(&mut acc, &[0.0; 20], &c.z, 0).unwrap();
        assert_eq!(acc, vec![3.0; 4]);
        assert!(z_update(&mut acc, &column, &c.z, 9).is_err());
    }

    #[test]
    fn time_update_and_injection() {
        assert_eq!(time_update(&[5.0], &[2.0]).unwrap(), vec![3.0]);
        assert_eq!(time_update(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(time_update(&[1.0], &[]).is_err());
        let mut col = vec![0.0; 12];
        inject_source(&mut col, 0, 0.0).unwrap();
        assert!(col.iter().all(|v| *v == 0.0));
        inject_source(&mut col, 2, 1.5).unwrap();
        inject_source(&mut col, 2, 1.5).unwrap();
        assert_eq!(col[6], 3.0);
        assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 1);
        assert!(matches!(inject_source(&mut col, 4, 1.0), Err(Error::SourceOutOfRange { .. })));
    }

    #[test]
    fn column_respects_memory() {
        let mem = MemoryModel::default();
        assert!(PEColumn::new(1000, 1000, unit_coeffs(), &mem).is_err());
        let col = PEColumn::new(1000, 334, unit_coeffs(), &mem).unwrap();
        assert!(col.halos_are_zero());
        assert_eq!(col.interior().len(), 1000);
    }
}
