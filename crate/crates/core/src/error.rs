use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: &'static str, reason: String },

    #[error("unknown token `{0}` (out of vocabulary)")]
    UnknownToken(String),

    #[error("degenerate normalization: {0}")]
    Normalization(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("prompt of {len} tokens exceeds context limit {limit} ({detail})")]
    ContextOverflow {
        len: usize,
        limit: usize,
        detail: String,
    },

    #[error("prompt has no answer segment")]
    MissingAnswer,

    #[error("insufficient candidates in {pool} pool: need {need}, have {have}")]
    InsufficientPool {
        pool: &'static str,
        need: usize,
        have: usize,
    },

    #[error("non-finite loss at batch {batch} (step {step})")]
    NonFinite { batch: usize, step: usize },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("config invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing artifact `{}` (run stage `{stage}` first)", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
