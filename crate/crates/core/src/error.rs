use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} over an empty axis or selection")]
    Empty { op: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass (use retain)")]
    TapeConsumed,

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported WAV encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("WAV file contains no samples: {0}")]
    EmptyAudio(PathBuf),

    #[error("sample rate mismatch: expected {expected} Hz, got {found} Hz")]
    SampleRate { expected: u32, found: u32 },

    #[error("clip of {samples} samples is shorter than one {n_fft}-sample frame")]
    ClipTooShort { samples: usize, n_fft: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("too few pairs: {0}")]
    NoPairs(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing artifact {0} (run the producing stage first)")]
    MissingArtifact(PathBuf),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
