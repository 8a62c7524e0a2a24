use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown token {0:?} in caption")]
    UnknownToken(String),

    #[error("caption has {0} tokens, more than the {1}-token context")]
    CaptionTooLong(usize, usize),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("held-out task {0} is not available in training mode")]
    HeldOutTask(String),

    #[error("corpus already exists at {0} (use force to overwrite)")]
    CorpusExists(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("phase mismatch: expected {expected}, found {found}")]
    PhaseMismatch { expected: String, found: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("PNG decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("PNG encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches a path to an I/O error.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
