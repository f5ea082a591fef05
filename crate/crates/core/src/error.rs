use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Linear solver failed to converge.
    #[error("solver error: {msg} (final residual {residual:.3e} after {iterations} iterations)")]
    Solver {
        msg: String,
        residual: f64,
        iterations: usize,
    },

    /// Malformed or incompatible file content.
    #[error("format error: {0}")]
    Format(String),

    /// Inconsistent data encountered while processing a dataset.
    #[error("data error: {0}")]
    Data(String),

    /// Internal invariant violated.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    /// Process exit code associated with this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 2,
            Error::Format(_) | Error::Data(_) | Error::Io(_) => 3,
            Error::Solver { .. } => 4,
            Error::Internal(_) => 1,
        }
    }
}
