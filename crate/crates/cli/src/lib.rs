//! Experiment driver for situational fusion: environment suites, affinity
//! estimation, training, evaluation, robustness sweeps, gate analytics and
//! comparison tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod table;

pub use commands::run_pipeline;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
