use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `location` names the line, record or byte offset.
    #[error("parse error in {file} at {location}: {message}")]
    Parse {
        file: String,
        location: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A stage produced or received data that breaks one of its invariants.
    #[error("invariant violated in stage `{stage}`: {invariant}")]
    Invariant { stage: &'static str, invariant: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(file: impl Into<String>, location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Invariant { .. } => "invariant",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
