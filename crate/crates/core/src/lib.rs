//! Desk-scale reproduction of a wafer-scale 25-point stencil solver.
//!
//! - [`reference`]: sequential acoustic wave solver, the numerical oracle.
//! - [`fabric`]: cycle-level 2D mesh simulator with localized broadcasts.
//! - [`wse`]: the distributed solver running on the simulated fabric.
//! - [`perf`]: roofline, throughput and weak-scaling arithmetic.
//! - [`config`] and [`snapshot`]: document formats shared with the CLI.

pub mod config;
pub mod error;
pub mod fabric;
pub mod perf;
pub mod reference;
pub mod snapshot;
pub mod wse;

pub use error::{Error, FabricError, Result};
