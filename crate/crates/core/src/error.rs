use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: missing columns, unparsable fields, corrupt records.
    #[error("format error: {0}")]
    Format(String),

    #[error("format error in {path}: {reason}")]
    Record { path: PathBuf, reason: String },

    /// Structurally valid data that violates a track/scene invariant.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss for window tv={tv_id} t={frame}")]
    NonFiniteLoss { tv_id: u64, frame: i64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_) | Error::Numeric(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
