//! Experiment runner for the forgetnet engine: JSON configs in, CSV reports
//! and a summary JSON out.

pub mod config;
pub mod error;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind, Overrides};
pub use error::CliError;
pub use runner::{run, Summary};
