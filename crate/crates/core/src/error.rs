use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("id {id} out of range for vocabulary of size {size}")]
    IdRange { id: usize, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite gradient in `{name}` at element {index}: {value}")]
    NonFiniteGradient {
        name: String,
        index: usize,
        value: f64,
    },

    #[error("bad checkpoint magic: {0:?}")]
    BadMagic([u8; 8]),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("checkpoint index disagreement for `{name}`: {detail}")]
    IndexMismatch { name: String, detail: String },

    #[error("missing upstream artifact {path:?} (produced by `{stage}`)")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("manifest field `{path}`: {message}")]
    Manifest { path: String, message: String },

    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
