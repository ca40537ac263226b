//! Config-driven runner for the toy experiments and theory checks.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::CliError;
