//! Command-line harness for `rgr`: config-driven dataset generation,
//! training, evaluation and forecasting with artifacts written to disk.
//!
//! The binary is a thin wrapper over [`cli::main_with`]; the stages live in
//! [`pipeline`] and can be driven directly from tests.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{ConfigError, ExperimentConfig, LoadedConfig};
pub use error::CliError;
