use thiserror::Error;

use crate::sbl::TraceEntry;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("combiner whitening failed: W_q W_q^H not positive definite after {attempts} draws")]
    Whitening { attempts: usize },

    #[error("linear solve failed: {0}")]
    Singular(String),

    /// The estimator produced non-finite or runaway values. The trace holds
    /// every iteration completed before the failure.
    #[error("estimator diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        trace: Vec<TraceEntry>,
    },

    #[error("training diverged in stage {stage} (depth {depth}), epoch {epoch}: {detail}")]
    TrainingDiverged {
        stage: usize,
        depth: usize,
        epoch: usize,
        detail: String,
    },

    #[error("unknown algorithm '{0}'")]
    UnknownAlgorithm(String),

    #[error("config mismatch: file was written under config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::TrainingDiverged { .. })
    }
}
