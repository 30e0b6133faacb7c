use thiserror::Error;

use crate::fabric::{Color, LinkDirection};

/// Errors raised by the solvers, the fabric simulator and the document readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported stencil order {0} (only 8 is supported)")]
    UnsupportedOrder(u32),

    #[error("instability: non-finite value at cell ({i}, {j}, {k}) after step {step}")]
    Instability {
        step: usize,
        i: usize,
        j: usize,
        k: usize,
    },

    #[error(transparent)]
    Fabric(#[from] FabricError),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("block [{start}, {end}) exceeds column of {len} cells")]
    BlockOutOfBounds { start: usize, end: usize, len: usize },

    #[error("source z offset {src_z} outside column of {nz} cells")]
    SourceOutOfRange { src_z: usize, nz: usize },

    #[error("column of {nz} cells does not fit in {capacity} bytes of PE memory")]
    ColumnTooLarge { nz: usize, capacity: usize },

    #[error("fabric is {fabric_w}x{fabric_h} but grid needs {nx}x{ny} PEs")]
    FabricMismatch {
        fabric_w: usize,
        fabric_h: usize,
        nx: usize,
        ny: usize,
    },

    #[error("rows disagree on nz/steps: reference ({ref_nz}, {ref_steps}), row ({nz}, {steps})")]
    MismatchedRows {
        ref_nz: u64,
        ref_steps: u64,
        nz: u64,
        steps: u64,
    },

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Protocol and resource errors of the mesh fabric simulator.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("color {color} is not routed from {arrived_on:?}")]
    ColorNotRouted { color: Color, arrived_on: LinkDirection },

    #[error("color {0} exceeds the color budget of {1}")]
    ColorOutOfBudget(Color, u8),

    #[error("color {0} is used by more than one broadcast pattern")]
    ColorCollision(Color),

    #[error("malformed command word {0:#010x}")]
    MalformedCommand(u32),

    #[error("packet is not a command")]
    NotACommand,

    #[error("shift for step {got} applied to router at step {expected}")]
    StepMismatch { expected: u16, got: u16 },

    #[error("queue overflow on {link:?} input of router ({x}, {y}), capacity {capacity}")]
    QueueOverflow {
        x: usize,
        y: usize,
        link: LinkDirection,
        capacity: usize,
    },

    #[error("deadlock at cycle {cycle}: no progress in a full sweep")]
    Deadlock { cycle: u64 },

    #[error("no broadcast pattern installed for {0:?}")]
    NoPattern(crate::fabric::Direction),

    #[error("PE ({x}, {y}) received {got} words in slot {slot}, expected {expected}")]
    DeliveryMismatch {
        x: usize,
        y: usize,
        slot: usize,
        got: usize,
        expected: usize,
    },

    #[error("payload count {got} does not match {expected} PEs")]
    PayloadCount { expected: usize, got: usize },

    #[error("payload of PE {pe} has {got} words, expected {expected}")]
    PayloadLength { pe: usize, expected: usize, got: usize },

    #[error("block length must be at least 1")]
    EmptyBlock,
}

pub type Result<T> = std::result::Result<T, Error>;
