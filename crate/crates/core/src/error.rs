use std::path::PathBuf;

use ganext_tensor::TensorError;
use thiserror::Error;

use crate::losses::LossBreakdown;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid volume: {0}")]
    Volume(String),
    #[error("{0}")]
    Split(String),
    #[error("{0}")]
    Preprocess(String),
    #[error("{0}")]
    Augment(String),
    #[error("{0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Loss(String),
    #[error("{0}")]
    Metric(String),
    #[error("{0}")]
    Labels(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Numeric(Box<NumericAbort>),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Diagnostic dump attached to a non-finite loss.
#[derive(Debug, Clone)]
pub struct NumericAbort {
    pub step: u64,
    pub phase: &'static str,
    pub breakdown: LossBreakdown,
    pub provenance: Vec<String>,
}

impl std::fmt::Display for NumericAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite {} loss at step {}: {:?}; batch: [{}]",
            self.phase,
            self.step,
            self.breakdown,
            self.provenance.join("; ")
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
