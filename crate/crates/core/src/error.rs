use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("unsupported op in differentiable graph: {0}")]
    UnsupportedOp(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("wav parse error at byte {offset}: {detail}")]
    WavParse { offset: u64, detail: String },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("clip too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate mask: {masked} of {total} patches would be masked")]
    DegenerateMask { masked: usize, total: usize },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
