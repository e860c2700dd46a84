use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("undecodable image: {0}")]
    ImageDecode(String),

    #[error("malformed manifest at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading or validating a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}` in checkpoint")]
    UnexpectedTensor(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}
