//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Errors produced by the engine.
///
/// Variants map onto the CLI exit-code convention: [`Error::Usage`] and
/// [`Error::Validation`] exit with code 2, everything else with code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in {path}: field `{field}`: {reason}")]
    Format {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("unsupported datatype in {path}: code {code}")]
    UnsupportedType { path: PathBuf, code: i16 },

    #[error("shape mismatch: {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("numerical failure at {context}: {reason}")]
    Numerical { context: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("ingestion error for {file}: {reason}")]
    Ingestion { file: String, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn parameter(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    /// Exit code for the CLI: 2 for usage/validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Validation(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
