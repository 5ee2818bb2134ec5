//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. The variants are
//! coarse on purpose: callers mostly care about which class of failure
//! occurred (bad config, missing artifact, diverged training run) so they
//! can map it to an exit code or a retry decision.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor operation received operands with incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// Tensor operation received a value outside its domain
    /// (for example `ln` of a non-positive entry).
    #[error("invalid value in {op}: {detail}")]
    InvalidValue { op: String, detail: String },

    /// A configuration file or programmatic config failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// A pipeline stage was invoked before the artifact it consumes exists.
    #[error("missing prerequisite {}: {hint}", path.display())]
    MissingPrerequisite { path: PathBuf, hint: String },

    /// A training loop produced a non-finite loss and refused to continue.
    #[error("training diverged in {stage} at step {step}: {detail}")]
    Diverged {
        stage: String,
        step: u64,
        detail: String,
    },

    /// The optimizer was asked to apply a non-finite gradient.
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    /// The corpus sampler could not satisfy its constraints
    /// (for example a requested label that rejection sampling never hit).
    #[error("corpus constraint unsatisfiable: {0}")]
    CorpusInfeasible(String),

    /// Unknown word, unknown token id, or a malformed vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed dataset file (bad header, wrong kind, short record).
    #[error("dataset file error: {0}")]
    Dataset(String),

    /// Evaluation input that cannot be scored (for example an AUC request
    /// where one class is absent).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn value(op: &str, detail: impl Into<String>) -> Self {
        Error::InvalidValue {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
