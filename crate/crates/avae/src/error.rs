//! One error type for the whole crate, split by failure class rather than by
//! module: shape/geometry problems, numeric breakdown, caller mistakes, and
//! malformed external data.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or image geometry do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A computation produced NaN/Inf or an otherwise unusable value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The caller violated an API contract (missing gradient, bad argument).
    #[error("usage error: {0}")]
    Usage(String),

    /// A file or byte stream does not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A configuration file or override could not be interpreted.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for the [`Error::Numeric`] class; used by tests and the trainer's
    /// abort path.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
