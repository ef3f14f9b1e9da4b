use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum RopError {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimization diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl RopError {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        RopError::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Broad class of the failure, used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            RopError::NonFinite(_) | RopError::Diverged { .. } => ErrorKind::Numerical,
            RopError::Io(_) | RopError::Image(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

pub type Result<T> = std::result::Result<T, RopError>;
