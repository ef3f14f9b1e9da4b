use std::path::PathBuf;

use rop::{ErrorKind, RopError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] RopError),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Gradient check out of tolerance.
    #[error("{0}")]
    Check(String),

    /// Design check failed under `--strict`.
    #[error("{0}")]
    Design(String),
}

impl CliError {
    /// Process exit code: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            },
            CliError::Usage(_) | CliError::Config { .. } | CliError::Design(_) => 2,
            CliError::Read { .. } => 4,
            CliError::Check(_) => 3,
        }
    }

    /// Machine-readable tag printed with the message.
    pub fn code_name(&self) -> &'static str {
        match self.exit_code() {
            2 => "validation",
            3 => "numerical",
            _ => "io",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(RopError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(RopError::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
