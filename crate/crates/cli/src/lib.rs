//! Command-line driver: data generation, pretraining, training, evaluation,
//! the ablation grid, dataset analysis and scoring.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli};
pub use error::{CliError, Result};
