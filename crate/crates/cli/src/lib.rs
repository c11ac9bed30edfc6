//! The `air` command-line workflow: synthetic data generation, text
//! refinement, biweekly backtests, forecast figures and the gradient
//! suite, all driven by one JSON run configuration ([`config`]).

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
