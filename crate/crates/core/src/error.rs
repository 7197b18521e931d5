//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input or configuration (bad shapes, non-finite values, out-of-range settings).
    #[error("validation error: {0}")]
    Validation(String),

    /// Component index outside `1..=K`.
    #[error("component index {index} out of range 1..={k}")]
    ComponentIndex { index: usize, k: usize },

    /// Sufficient statistics carry no mass; the caller decides how to proceed
    /// (trainers keep the previous parameters).
    #[error("empty component: zero weight in sufficient statistics")]
    EmptyComponent,

    /// Covariance reconstruction failed even after regularization.
    #[error("degenerate statistics: Cholesky factorization failed for component {component}")]
    DegenerateStats { component: usize },

    /// Requested algorithm/family combination is not implemented.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training produced non-finite parameters or gradients.
    #[error("numerical abort at iteration {t}: {reason}")]
    Numerical { t: u64, reason: String },

    /// Synthetic generation could not reach the requested overlap.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
