use std::path::PathBuf;

use thiserror::Error;

/// Broad classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller supplied inconsistent arguments.
    Usage,
    /// Input data is malformed or unusable.
    Data,
    /// A numerical routine failed (singular matrices, non-stationarity, divergence).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("degenerate panel: {0}")]
    Degenerate(String),
    #[error("not stationary: {0}")]
    NonStationary(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Dimension(_) => ErrorKind::Usage,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::Data(_) | Error::Degenerate(_) => {
                ErrorKind::Data
            }
            Error::NonStationary(_) | Error::Numerical(_) => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
