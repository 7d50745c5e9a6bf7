use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    /// The tape was already consumed, or a handle belongs to another tape.
    #[error("tape state error: {0}")]
    State(String),

    #[error("training error in `{param}`: {reason}")]
    Training { param: String, reason: String },

    #[error("IMP round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no checkpoint recorded at step {0}")]
    MissingCheckpoint(u64),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("adversarial error: {0}")]
    Adversarial(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("artifact error at {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn training(param: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Training {
            param: param.into(),
            reason: reason.into(),
        }
    }
}
