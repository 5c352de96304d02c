use std::fmt;

use thiserror::Error;

/// Crate-wide error type. The CLI maps each variant to a process exit code:
/// config/contract/dimension errors exit 2, numeric failures exit 3,
/// I/O errors exit 4.
#[derive(Debug, Error)]
pub enum TdrgError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("i/o error: {path}: {message}")]
    Format { path: String, message: String },
}

impl TdrgError {
    pub fn dim(msg: impl fmt::Display) -> Self {
        TdrgError::Dimension(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        TdrgError::Config(msg.to_string())
    }

    pub fn contract(msg: impl fmt::Display) -> Self {
        TdrgError::Contract(msg.to_string())
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        TdrgError::Numeric(msg.to_string())
    }

    /// Exit code contract: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            TdrgError::Dimension(_)
            | TdrgError::Config(_)
            | TdrgError::Contract(_)
            | TdrgError::Generation(_) => 2,
            TdrgError::Numeric(_) => 3,
            TdrgError::Io(_) | TdrgError::Format { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, TdrgError>;
