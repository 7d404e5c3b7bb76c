use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network config: rule `{rule}` violated ({detail})")]
    InvalidConfig { rule: &'static str, detail: String },

    #[error("batch-norm running statistics are not initialized")]
    UninitializedStats,

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic { what: &'static str, expected: String, found: String },

    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: String },

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("invalid label value {0} (allowed: 0, 1, 2, 4)")]
    InvalidLabel(u8),

    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("missing model for {0}")]
    MissingModel(String),

    #[error("checkpoint has no normalization statistics; refusing to run unnormalized inference")]
    Unnormalized,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
