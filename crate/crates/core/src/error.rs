use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The store file does not follow the on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// A value violates a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range for {len} frames")]
    Bounds { index: usize, len: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A backend reply could not be turned into the expected structure.
    #[error("parse error: {0}")]
    Parse(String),

    /// The backend could not be reached or returned an unreadable body.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// The backend answered with an HTTP error status.
    #[error("service error {status}: {excerpt}")]
    Service { status: u16, excerpt: String },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
