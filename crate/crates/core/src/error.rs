use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("{what} {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid concept sets: {0}")]
    InvalidConcepts(String),

    #[error("non-finite loss at step {step} (prototype {prototype})")]
    NonFiniteLoss { step: usize, prototype: usize },

    #[error("session for prototype {0} is not pending")]
    SessionState(usize),

    #[error("block `{block}`: {reason}")]
    Format { block: String, reason: String },

    #[error("checksum mismatch in block `{block}`")]
    Checksum { block: String },

    #[error("unsupported schema version {0}")]
    UnsupportedSchema(String),

    #[error("bundle validation failed: {0}")]
    Validation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
