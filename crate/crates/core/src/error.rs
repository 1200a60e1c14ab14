use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChelaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("singular matrix (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("sequence length {len} exceeds configured maximum {max}")]
    LengthExceeded { len: usize, max: usize },

    #[error("token id {token} out of vocabulary of size {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint has bad magic")]
    BadMagic,

    #[error("checkpoint payload truncated: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checkpoint manifest invalid: {0}")]
    Manifest(String),

    #[error("checkpoint tensor {name}: {reason}")]
    OffsetMismatch { name: String, reason: String },

    #[error("checkpoint tensor {name} has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("value in {0} is not exactly representable as f32")]
    NotF32(String),

    #[error("benchmark refused: {0}")]
    BudgetExceeded(String),

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

impl ChelaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChelaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = ChelaError> = std::result::Result<T, E>;
