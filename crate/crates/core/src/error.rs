use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine reports. Variants are grouped so callers (the
/// CLI in particular) can map them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("{0}: backward called before forward")]
    BackwardBeforeForward(&'static str),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: u64 },

    #[error("checkpoint has bad magic {found:?} (expected {expected:?})")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated: {0}")]
    Truncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
