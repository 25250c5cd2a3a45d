use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SrlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SrlError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid utterance `{id}`: {message}")]
    InvalidUtterance { id: String, message: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain {domain} has {available} utterances, need {required}")]
    InsufficientDomain {
        domain: String,
        available: usize,
        required: usize,
    },

    #[error("non-finite activations in {layer}")]
    NonFinite { layer: String },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("embedding norm {norm} deviates from 1 beyond {tolerance}")]
    NormViolation { norm: f64, tolerance: f64 },

    #[error("degenerate variance in variational estimator")]
    DegenerateVariance,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("frozen parameters changed during {0}")]
    FrozenViolation(String),

    #[error("signal source for `{0}` cannot be resolved")]
    UnresolvableSource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(String),
}
