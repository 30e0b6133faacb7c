use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes of local SRAM per PE.
pub const PE_MEMORY_BYTES: usize = 48 * 1024;

/// Fixed per-PE footprint (code, stack, coefficient vectors) outside the
/// column and block buffers. Any value in `(1088, 10688]` reproduces the
/// measured `nz -> b` choices; see the block-size tests.
pub const CALIBRATED_OVERHEAD_BYTES: usize = 4096;

/// Buffers that scale with `b`: accumulator (b), four receive areas (5b each)
/// and the send area (b).
pub const WORDS_PER_BLOCK_CELL: usize = 1 + 4 * 5 + 1;

/// Halo cells on each side of a column.
pub const HALO: usize = 4;

const WORD_BYTES: usize = 4;

/// Local memory budget of one PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub capacity: usize,
    pub overhead: usize,
    pub words_per_b: usize,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            capacity: PE_MEMORY_BYTES,
            overhead: CALIBRATED_OVERHEAD_BYTES,
            words_per_b: WORDS_PER_BLOCK_CELL,
        }
    }
}

impl MemoryModel {
    pub fn with_capacity(capacity: usize) -> Result<Self> {
        let m = MemoryModel {
            capacity,
            ..Self::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity <= self.overhead {
            return Err(Error::Config(format!(
                "memory capacity {} must exceed the fixed overhead {}",
                self.capacity, self.overhead
            )));
        }
        Ok(())
    }

    /// Bytes used by two time levels of `nz + 8` cells plus every buffer of length `b`.
    pub fn footprint(&self, b: usize, nz: usize) -> usize {
        WORD_BYTES * (2 * (nz + 2 * HALO) + self.words_per_b * b) + self.overhead
    }

    pub fn fits(&self, b: usize, nz: usize) -> bool {
        self.footprint(b, nz) <= self.capacity
    }
}

/// Split of a column of `nz` cells into `k` blocks of at most `b` cells.
/// All blocks have length `b` except possibly the last one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub nz: usize,
    pub b: usize,
    pub k: usize,
}

impl BlockPlan {
    /// Plan with exactly `k` blocks of length `ceil(nz / k)`.
    pub fn with_blocks(nz: usize, k: usize, mem: &MemoryModel) -> Result<Self> {
        if nz == 0 || k == 0 || k > nz {
            return Err(Error::Config(format!("cannot split {nz} cells into {k} blocks")));
        }
        let b = nz.div_ceil(k);
        if (k - 1) * b >= nz {
            return Err(Error::Config(format!(
                "{k} blocks of {b} cells leave the last block of a {nz}-cell column empty"
            )));
        }
        if !mem.fits(b, nz) {
            return Err(Error::Config(format!(
                "block length {b} needs {} bytes, capacity is {}",
                mem.footprint(b, nz),
                mem.capacity
            )));
        }
        Ok(BlockPlan { nz, b, k })
    }

    /// `(start, length)` of every block.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.k).map(move |j| {
            let start = j * self.b;
            (start, self.b.min(self.nz - start))
        })
    }
}

/// Largest block length that fits, under the equal-blocks rule: the smallest
/// `k` such that `ceil(nz / k)` cells per block fit in memory.
pub fn select_block_size(nz: usize, mem: &MemoryModel) -> Result<BlockPlan> {
    mem.validate()?;
    if nz == 0 {
        return Err(Error::Config("nz must be positive".into()));
    }
    if !mem.fits(1, nz) {
        return Err(Error::ColumnTooLarge {
            nz,
            capacity: mem.capacity,
        });
    }
    (1..=nz)
        .map(|k| (k, nz.div_ceil(k)))
        .find(|&(_, b)| mem.fits(b, nz))
        .map(|(k, b)| BlockPlan { nz, b, k })
        .ok_or(Error::ColumnTooLarge {
            nz,
            capacity: mem.capacity,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Measured (nz, b) pairs on the 755 x 994 fabric.
    const MEASURED: [(usize, usize); 7] = [(100, 100), (200, 200), (300, 300), (400, 400), (500, 250), (700, 350), (1000, 334)];

    #[test]
    fn reproduces_measured_block_sizes() {
        let mem = MemoryModel::default();
        for (nz, b) in MEASURED {
            let plan = select_block_size(nz, &mem).unwrap();
            assert_eq!(plan.b, b, "nz = {nz}");
            assert!(plan.k * plan.b >= nz);
        }
        assert_eq!(select_block_size(1000, &mem).unwrap().k, 3);
    }

    #[test]
    fn overhead_lies_in_the_feasible_interval() {
        // Brute force over every overhead: which ones reproduce all rows?
        let feasible: Vec<usize> = (0..PE_MEMORY_BYTES)
            .filter(|&overhead| {
                let mem = MemoryModel {
                    overhead,
                    ..MemoryModel::default()
                };
                MEASURED
                    .iter()
                    .all(|&(nz, b)| select_block_size(nz, &mem).ok().map(|p| p.b) == Some(b))
            })
            .collect();
        assert_eq!(feasible.first(), Some(&1089));
        assert_eq!(feasible.last(), Some(&10688));
        assert_eq!(feasible.len(), 10688 - 1089 + 1);
        assert!(feasible.contains(&CALIBRATED_OVERHEAD_BYTES));
    }

    #[test]
    fn too_tall_columns_are_rejected() {
        let mem = MemoryModel::default();
        assert!(matches!(select_block_size(6000, &mem), Err(Error::ColumnTooLarge { .. })));
        assert!(MemoryModel::with_capacity(100).is_err());
    }

    #[test]
    fn forced_plans() {
        let mem = MemoryModel::default();
        let p = BlockPlan::with_blocks(100, 4, &mem).unwrap();
        assert_eq!((p.b, p.k), (25, 4));
        let p = BlockPlan::with_blocks(1000, 3, &mem).unwrap();
        assert_eq!(p.blocks().collect::<Vec<_>>(), vec![(0, 334), (334, 334), (668, 332)]);
        assert!(BlockPlan::with_blocks(5, 4, &mem).is_err());
        assert!(BlockPlan::with_blocks(1000, 1, &mem).is_err());
    }
}
