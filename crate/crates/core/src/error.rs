//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("malformed input at token {position}: {reason}")]
    MalformedInput { position: usize, reason: String },

    #[error("sequence length {len} exceeds model maximum {max}")]
    LengthExceeded { len: usize, max: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("numeric divergence detected: {0}")]
    DivergenceDetected(String),

    #[error("output cache does not match: {0}")]
    CacheMismatch(String),

    #[error("site map mismatch: {0}")]
    SiteMapMismatch(String),

    #[error("cannot combine circuits with different ablation kinds ({0} vs {1})")]
    AblationKindMismatch(String, String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no positions in scope for circuit task `{circuit_task}` on `{eval_task}`")]
    EmptyScope {
        circuit_task: String,
        eval_task: String,
    },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("task `{0}` is not supported")]
    UnsupportedTask(String),

    #[error("program needs {needed} {what} but the configuration provides {available}")]
    DimensionOverflow {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
