//! Distributed solver: X and Y on the PE grid, Z in local memory, blocks of
//! `b` cells streamed through four localized broadcasts per step.

mod column;
mod engine;
mod memory;

pub use column::{fmul_incoming, inject_source, reduce_accumulator, time_update, z_update, ColumnCoefficients, PEColumn, Stream};
pub use engine::{run_distributed, CommStats, DistributedSolver};
pub use memory::{
    select_block_size, BlockPlan, MemoryModel, CALIBRATED_OVERHEAD_BYTES, HALO, PE_MEMORY_BYTES, WORDS_PER_BLOCK_CELL,
};
