//! Experiment runner for multi-head sparse ensembles: JSON configs, single
//! runs with history/summary/checkpoint artifacts, evaluation of saved
//! checkpoints, and seeded parameter sweeps.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::CliError;
