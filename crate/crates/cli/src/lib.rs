//! Command implementations behind the `sigma` binary.
//!
//! Every command returns a [`RunReport`]. Exit codes are a stable contract:
//! 0 on success, 1 when a check or experiment fails, 2 for config errors.

pub mod ablate;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod paramcount;
pub mod report;
pub mod train;

use std::fmt;

pub use config::{AblationConfig, ExperimentConfig};
pub use report::RunReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Schema or semantic config problem at a dotted field path.
    Config { path: String, message: String },
    /// A check or experiment failed. The report, if any, is still written.
    Failed { message: String, report: Option<Box<RunReport>> },
    Io(std::io::Error),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { path: path.into(), message: message.into() }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        CliError::Failed { message: message.into(), report: None }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Failed { .. } | CliError::Io(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { path, message } => write!(f, "config error at {path}: {message}"),
            CliError::Failed { message, .. } => write!(f, "{message}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<sigma_core::Error> for CliError {
    fn from(e: sigma_core::Error) -> Self {
        match e {
            sigma_core::Error::Config(m) => CliError::config("<config>", m),
            sigma_core::Error::Io(e) => CliError::Io(e),
            other => CliError::failed(other.to_string()),
        }
    }
}

/// Worker count for multi-seed runs: `SIGMA_THREADS` if set and positive,
/// else the number of available cores.
pub fn seed_threads() -> usize {
    std::env::var("SIGMA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
