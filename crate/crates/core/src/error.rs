//! Error type shared by every module of the engine.

use std::path::PathBuf;

/// Summary attached to a rollout that produced no completed trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutFailure {
    pub tokens_used: usize,
    pub pruned: usize,
    pub truncated: usize,
    pub refill_attempts: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EchoError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(
        "rollout produced no completed trajectory ({} tokens, {} pruned, {} truncated, {} refill attempts)",
        .0.tokens_used, .0.pruned, .0.truncated, .0.refill_attempts
    )]
    RolloutFailure(RolloutFailure),

    #[error("vote failure: all {0} extracted answers are unparseable")]
    VoteFailure(usize),

    #[error("non-finite gradient entry in context {0:?}")]
    NonFiniteGradient(Vec<usize>),

    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("missing file(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EchoError {
    pub fn config(msg: impl Into<String>) -> Self {
        EchoError::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EchoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EchoError>;
