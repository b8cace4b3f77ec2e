use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown hook site {0}")]
    UnknownHookSite(String),

    #[error("word {0:?} is not in the toy vocabulary")]
    UnknownWord(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("feature bank already holds an entry for {0}")]
    DuplicateEntry(String),

    #[error("feature bank entry {0} is missing")]
    MissingEntry(String),

    #[error("feature bank manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("provider {0} is unavailable")]
    Unavailable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
