use std::io;

use thiserror::Error;

/// Errors produced across the decoding engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("prompt layout has no context positions")]
    EmptyContext,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("detector has no positive coefficient")]
    NoPositiveEvidence,

    #[error("geometry mismatch: detector {detector}, oracle {oracle}")]
    GeometryMismatch { detector: String, oracle: String },

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("corrupt trace: {0}")]
    CorruptTrace(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("trace exhausted at step {step}")]
    TraceExhausted { step: usize },

    #[error("replay diverged from the recording at step {step}")]
    Divergence { step: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("oracle failed at step {step}: {source}")]
    Oracle {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
