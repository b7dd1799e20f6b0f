//! Shared error type and exit-code mapping for the whole crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Logit vector contains NaN or infinite entries.
    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    /// Probability vector violates the simplex constraints.
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    /// Array dimensions do not match what the operation expects.
    #[error("shape mismatch: {0}")]
    InvalidShape(String),

    /// One or more configuration fields are out of range. Every violated
    /// field is listed, not just the first.
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    /// Not enough trials, blocks, or scores to perform the operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// On-disk artifact is malformed. `offset` is the byte position at
    /// which the problem was detected, when that is meaningful.
    #[error("format error{}: {message}", .offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { offset: Option<u64>, message: String },

    /// A non-finite value appeared where the math requires finite numbers.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Member training could not produce a usable model.
    #[error("training failed: {0}")]
    Training(String),

    /// Requested coverage level is not on the fitted grid.
    #[error("unknown operating point: alpha={0} is not on the policy grid")]
    UnknownOperatingPoint(f64),

    /// Coverage curve is unsorted or has duplicate coverage levels.
    #[error("invalid curve: {0}")]
    InvalidCurve(String),

    /// A pipeline stage was invoked before its inputs exist on disk.
    #[error("missing stage artifact {}: {hint}", .path.display())]
    Stage { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 config error, 3 stage error,
    /// 4 numerical error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::Numerical(_) | Error::Training(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn format(offset: Option<u64>, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    pub(crate) fn stage(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        Error::Stage { path: path.into(), hint: hint.into() }
    }
}
