//! Command-line toolkit around `repflow-core`: frame ingestion, flow export
//! and visualisation, `key = value` configuration files, the runtime
//! benchmark harness, and the train/eval/ablate entry points.

pub mod bench;
pub mod commands;
pub mod config;
pub mod flo;
pub mod pgm;
pub mod viz;

use std::fmt;
use std::path::Path;

/// CLI-level error, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, bad configuration, invalid grid. Exit code 1.
    Usage(String),
    /// Filesystem failure; the message names the path. Exit code 2.
    Io(String),
    /// Numeric failure (non-finite values, training divergence). Exit code 3.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Io(msg) => write!(f, "I/O error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<repflow_core::Error> for CliError {
    fn from(e: repflow_core::Error) -> Self {
        match e {
            repflow_core::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
