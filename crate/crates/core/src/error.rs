use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {got:?}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range for output dimension {dim}")]
    ClassOutOfRange { index: usize, dim: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("only {available} non-overlapping {kernel}x{kernel} windows can be placed, {requested} requested")]
    InsufficientRegions {
        requested: usize,
        available: usize,
        kernel: usize,
    },

    #[error("original score {0:e} too close to zero for normalization")]
    UnstableNormalization(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::UnstableNormalization(_) => 3,
            _ => 2,
        }
    }
}
