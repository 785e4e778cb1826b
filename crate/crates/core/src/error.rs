//! Error types shared by every module in the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Failures surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    /// The caller passed arguments outside an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data (JSON lines, replay files, critiques) could not be interpreted.
    #[error("data error: {0}")]
    Data(String),

    /// A candidate provider failed and retries were exhausted.
    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),

    /// A run stopped because its provider kept failing.
    #[error("run for question {question_id} aborted after {} candidates: {cause}", partial.candidates.len())]
    RunAborted {
        question_id: String,
        cause: ProviderError,
        partial: Box<crate::orchestrator::PartialRun>,
    },

    /// Neither the evidence election nor the answer-level fallback produced an answer.
    #[error("no answer: {0}")]
    NoAnswer(String),

    /// The toy trainer produced a NaN or infinite gradient.
    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Failures of a single candidate acquisition.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    /// The provider has no more outputs for this question (replay files).
    #[error("provider exhausted after {0} outputs")]
    Exhausted(usize),

    /// The provider did not answer within its deadline.
    #[error("provider timed out after {0:?}")]
    Timeout(std::time::Duration),

    /// Transport or protocol failure.
    #[error("{0}")]
    Failed(String),
}
