use std::path::PathBuf;

use fsar_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("data error at record {index}: {message}")]
    Data { index: usize, message: String },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse grouping used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Tensor(TensorError::Config(_)) => ErrorKind::Config,
            Error::Numeric(_) | Error::Tensor(TensorError::Numeric(_)) => ErrorKind::Numeric,
            Error::Contract(_) | Error::Tensor(_) => ErrorKind::Config,
            Error::Format(_)
            | Error::Integrity(_)
            | Error::Data { .. }
            | Error::Lookup(_)
            | Error::Sampling(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Lets core routines run inside closures that expect tensor errors, such as
/// the finite-difference checker.
impl From<Error> for TensorError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(t) => t,
            Error::Config(m) => TensorError::Config(m),
            other => TensorError::Numeric(other.to_string()),
        }
    }
}
