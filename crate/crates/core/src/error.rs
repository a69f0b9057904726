use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid token grid: {0}")]
    InvalidGrid(String),

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    NotDivisible {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("image parse error in {path}: {reason}")]
    ImageParse { path: PathBuf, reason: String },

    #[error("bad magic {found:?} at offset {offset} (expected \"FTUR\")")]
    BadMagic { found: [u8; 4], offset: usize },

    #[error("unsupported version {found} at offset {offset} (expected 1)")]
    BadVersion { found: u16, offset: usize },

    #[error("bad header field `{field}` at offset {offset}: {reason}")]
    BadHeader {
        field: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dimension mismatch in class `{class}` file {file}: {reason}")]
    DimensionMismatch {
        class: String,
        file: PathBuf,
        reason: String,
    },

    #[error("class `{class}` has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("non-finite support loss at inner-loop step {step}")]
    NonFiniteLoss { step: usize },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by non-finite numerics rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } => true,
            Error::Episode { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
