//! Wavefield files: `WSF1`, then nx, ny, nz as little-endian u32, then the
//! cells as little-endian f32 with x varying fastest.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::reference::Grid3D;

pub const MAGIC: &[u8; 4] = b"WSF1";
pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<f32>,
}

impl Snapshot {
    pub fn new(grid: &Grid3D, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Snapshot {
            nx: grid.nx,
            ny: grid.ny,
            nz: grid.nz,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in [self.nx, self.ny, self.nz] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(Error::Snapshot("missing WSF1 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (nx, ny, nz) = (dim(1), dim(2), dim(3));
        let cells = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::Snapshot("dimensions overflow".into()))?;
        let body = &bytes[HEADER_BYTES..];
        if body.len() != 4 * cells {
            return Err(Error::Snapshot(format!(
                "{nx}x{ny}x{nz} needs {} data bytes, file has {}",
                4 * cells,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Snapshot { nx, ny, nz, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Difference between two fields, normalized by the max magnitude of `expected`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Cell with the largest difference, as (i, j, k).
    pub worst_cell: (usize, usize, usize),
    pub actual_at_worst: f32,
    pub expected_at_worst: f32,
    pub scale: f64,
}

impl Comparison {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn compare(actual: &Snapshot, expected: &Snapshot) -> Result<Comparison> {
    if actual.dims() != expected.dims() {
        return Err(Error::Snapshot(format!(
            "dimension mismatch: {:?} vs {:?}",
            actual.dims(),
            expected.dims()
        )));
    }
    let max = expected.data.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
    // An all-zero expected field falls back to absolute error.
    let scale = if max > 0.0 { max } else { 1.0 };
    let mut worst = (0usize, 0.0f64);
    let mut sum = 0.0;
    for (idx, (a, e)) in actual.data.iter().zip(&expected.data).enumerate() {
        let d = (*a as f64 - *e as f64).abs();
        let d = if d.is_nan() { f64::INFINITY } else { d };
        sum += d;
        if d > worst.1 {
            worst = (idx, d);
        }
    }
    let n = actual.data.len().max(1) as f64;
    let (nx, ny) = (actual.nx, actual.ny);
    let idx = worst.0;
    Ok(Comparison {
        max_rel_error: worst.1 / scale,
        mean_rel_error: sum / n / scale,
        worst_cell: (idx % nx, (idx / nx) % ny, idx / (nx * ny)),
        actual_at_worst: actual.data.get(idx).copied().unwrap_or(0.0),
        expected_at_worst: expected.data.get(idx).copied().unwrap_or(0.0),
        scale,
    })
}
