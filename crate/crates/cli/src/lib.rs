//! Command-line driver for synthetic data generation, training, sampling,
//! evaluation and slice rendering.

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult};
pub use config::RunConfig;
