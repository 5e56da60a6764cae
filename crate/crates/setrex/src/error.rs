//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed corpus content, with the 1-based line when known.
    #[error("corpus error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Corpus { line: Option<usize>, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// Numeric contract violations: non-finite values, degenerate softmax,
    /// zero-norm cosine inputs, consumed tapes.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn corpus(msg: impl Into<String>) -> Self {
        Error::Corpus { line: None, msg: msg.into() }
    }

    pub fn corpus_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Corpus { line: Some(line), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
