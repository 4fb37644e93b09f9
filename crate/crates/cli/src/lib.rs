//! Experiment driver for the cell-population stopping problem.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{compare_command, policy_eval_command, simulate_command, value_command, Artifact, Outcome};
pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;
