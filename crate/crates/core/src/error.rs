use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0} is empty")]
    EmptyInput(String),

    #[error("inconsistent feature dimension for slide {slide}: expected {expected}, found {found}")]
    DimensionMismatch {
        slide: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("no sample is present in every source")]
    EmptyIntersection,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("survival data contains no observed events")]
    NoEvents,

    #[error("Newton-Raphson did not converge after {iterations} iterations (max |score| = {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("Hessian is singular at lambda = 0; use a positive ridge penalty")]
    SingularHessian,

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("training produced a non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent inputs rather
    /// than by a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::EmptyInput(_)
                | Error::DimensionMismatch { .. }
                | Error::DuplicateId(_)
                | Error::EmptyIntersection
                | Error::InvalidInput(_)
                | Error::NonFinite(_)
                | Error::NoEvents
                | Error::Csv(_)
                | Error::Toml(_)
        )
    }
}
