use std::path::PathBuf;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad category of a failure, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("non-finite output from `{op}` with finite inputs")]
    NumericDomain { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("function is non-finite at perturbed coordinate {coordinate}")]
    FiniteDiff { coordinate: usize },

    #[error("analytic gradients disagree with finite differences beyond {tolerance}")]
    GradientMismatch { tolerance: f64 },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("training aborted at step {step}: non-finite total loss for 3 consecutive steps; last breakdown: {breakdown:?}")]
    NumericAbort {
        step: usize,
        breakdown: Box<LossBreakdown>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic at offset 0: expected \"EVC1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint truncated at offset {offset}")]
    Truncated { offset: usize },

    #[error("tensor name at offset {offset} is not valid UTF-8")]
    BadName { offset: usize },

    #[error("checkpoint tensors do not match the model: expected {expected:?}, found {found:?}")]
    Names {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::NumericAbort { .. }
            | Error::NumericDomain { .. }
            | Error::FiniteDiff { .. }
            | Error::GradientMismatch { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
