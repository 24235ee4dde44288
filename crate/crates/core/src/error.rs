use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::comm::CommError;
use crate::quantizers::CodecError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An iterate's L2 norm exceeded the divergence guard.
    #[error("diverged at iteration {iteration}: iterate norm {norm:.3e} exceeds guard")]
    Diverged { iteration: usize, norm: f64 },

    #[error("codec failure at iteration {iteration} on node {node}: {source}")]
    Codec {
        iteration: usize,
        node: usize,
        #[source]
        source: CodecError,
    },

    #[error("transport failure at iteration {iteration} on node {node}: {source}")]
    Comm {
        iteration: usize,
        node: usize,
        #[source]
        source: CommError,
    },

    #[error("worker for node {0} panicked")]
    WorkerPanic(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
