use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An index or coordinate outside the valid domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("ill-conditioned matrix: {0}")]
    Conditioning(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("seeding failed: {0}")]
    Seeding(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("invalid {field}: {message}")]
    Format { field: String, message: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(field: &str, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Validation-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::DimensionMismatch(_)
                | Error::Geometry(_)
                | Error::Domain(_)
        )
    }
}
