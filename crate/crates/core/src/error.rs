use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature map height {height} is not divisible into {parts} parts")]
    Partition { height: usize, parts: usize },

    #[error("no lexicon word occurs at least {min_count} times in the corpus")]
    EmptyBank { min_count: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("sample count mismatch: {0}")]
    SampleCount(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("format mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
