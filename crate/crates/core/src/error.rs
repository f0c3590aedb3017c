use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GtpError>;

#[derive(Debug, Error)]
pub enum GtpError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty slide: no patch passed the tissue filter")]
    EmptySlide,

    #[error("zero-norm embedding row {0}")]
    ZeroNorm(usize),

    #[error("validation failed for {path}: {reason}")]
    Validation { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png error on {path}: {reason}")]
    Png { path: PathBuf, reason: String },
}

impl GtpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GtpError::InvalidArgument(msg.into())
    }

    pub fn validation(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        GtpError::Validation {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GtpError::Io {
            path: path.into(),
            source,
        }
    }
}
