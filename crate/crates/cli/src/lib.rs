//! Configuration-driven experiment runner: dataset generation, training,
//! evaluation, sparsity sweeps and ablation grids.

pub mod config;
mod error;
pub mod run;

pub use error::{CliError, Result};
