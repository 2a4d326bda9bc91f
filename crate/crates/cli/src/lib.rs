//! Experiment harness for the `maxent-pref` laboratory: JSON configs, run
//! orchestration, sweeps, the verification battery and artifact emission.

pub mod app;
pub mod artifacts;
pub mod config;
pub mod error;
pub mod lab;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::{CliError, CliResult};
