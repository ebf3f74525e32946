//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by model evaluation, integration, solves, and store I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Time integration stopped before reaching the end of the requested span.
    #[error("integration failed at t = {last_t}: {reason}")]
    IntegrationFailure { last_t: f64, reason: String },

    /// A forcing evaluation returned a nonfinite value.
    #[error("nonfinite forcing at time index {time_index}, column {column}")]
    EvaluationFailure { time_index: usize, column: usize },

    /// A numerical solve could not produce a usable result.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A snapshot store on disk is missing, malformed, or inconsistent.
    #[error("failed to load {file}: {field}")]
    LoadFailure { file: PathBuf, field: String },

    /// Filesystem error while reading or writing artifacts.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(file: impl Into<PathBuf>, field: impl Into<String>) -> Self {
        Error::LoadFailure {
            file: file.into(),
            field: field.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
