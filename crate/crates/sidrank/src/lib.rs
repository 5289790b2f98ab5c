//! File formats, configuration, run directories and experiment pipelines
//! around `sidrank-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
