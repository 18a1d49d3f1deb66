use thiserror::Error;

/// Errors produced across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("integration failed: {0}")]
    Integration(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schedule inconsistency: {0}")]
    ScheduleInconsistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular path: {0}")]
    Singularity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
