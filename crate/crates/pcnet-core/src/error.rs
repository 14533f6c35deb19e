//! Crate-wide error type with a coarse category used for process exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category. The CLI maps these to exit codes
/// (configuration/usage -> 2, numerical -> 3, i/o -> 4).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Invalid configuration value or misuse of an API contract.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A value left the domain an operation is defined on.
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    /// Non-finite values or a diverged computation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Dataset ingestion or layout problem.
    #[error("dataset error: {0}")]
    Data(String),

    /// Checkpoint or artifact serialization problem.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Domain { .. } | Error::Data(_) => {
                ErrorKind::Config
            }
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Format(_) | Error::Io { .. } => ErrorKind::Io,
        }
    }
}
