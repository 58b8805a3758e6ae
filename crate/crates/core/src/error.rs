//! Error taxonomy shared by every module in the crate.
//!
//! Variants separate caller mistakes (configuration, shape, input) from
//! environment problems (I/O, missing resources) and malformed on-disk
//! data (format, ingestion), so the CLI can map them to exit codes and
//! callers can match on the failure class.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure classes produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a documented constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor shape is inconsistent with the model or operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data is numerically invalid (NaN/Inf) or out of contract.
    #[error("invalid input: {0}")]
    Input(String),

    /// A serialized artifact (checkpoint, weight bundle) is malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A dataset file or record could not be ingested.
    #[error("ingestion error for {path}: {detail}")]
    Ingest { path: PathBuf, detail: String },

    /// A required external resource is absent; the message says how to
    /// provide it.
    #[error("resource error: {0}")]
    Resource(String),

    /// Training diverged or produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn ingest(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
