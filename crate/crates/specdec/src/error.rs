use std::path::Path;

/// Error type shared by every module of the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model forward requires a non-empty committed context")]
    EmptyContext,

    #[error("commit requires a non-empty token list")]
    EmptyCommit,

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("calibration underflow: need at least {needed} trials per head, got {got}")]
    CalibrationUnderflow { needed: u64, got: u64 },

    #[error("dimension mismatch: {field} expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: u64,
        found: u64,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("sample size too small: {0}")]
    SampleSize(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Maps file-not-found onto the missing-artifact variant so the CLI can
    /// report a distinct exit code.
    pub fn from_io_at(err: std::io::Error, path: &Path) -> Error {
        if err.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(err)
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
