use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at linear index {index}")]
    NonFinite { index: usize },

    #[error("invalid dimensions {dims:?}: {reason}")]
    InvalidDims { dims: [usize; 3], reason: String },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("invalid spacing {0:?}: components must be positive and finite")]
    InvalidSpacing([f64; 3]),

    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("landmark error: {0}")]
    Landmarks(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("synthetic generation failed: {0}")]
    Synth(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the environment (filesystem) rather than
    /// by invalid user input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
