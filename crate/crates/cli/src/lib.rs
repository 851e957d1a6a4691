//! Experiment runner for `greenlab`: TOML configs in, CSVs and a hashed manifest out.

pub mod config;
pub mod error;
pub mod output;
pub mod presets;
pub mod runner;

pub use config::{Experiment, ExperimentConfig, Prepared};
pub use error::CliError;
pub use runner::{run, sweep, RunOptions, RunReport};
