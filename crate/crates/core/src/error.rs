use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("empty audio: {0}")]
    EmptyAudio(PathBuf),

    #[error("waveform too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate bin row at frame {frame}: total weight {total} below threshold")]
    DegenerateBinRow { frame: usize, total: f64 },

    #[error("unit vocabulary not fitted")]
    VocabularyNotFitted,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("adapter failure: {0}")]
    Adapter(String),

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: u64,
        detail: String,
    },

    #[error("invalid conversion request: {0}")]
    InvalidRequest(String),

    #[error("skipped: {0}")]
    Skipped(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
