use capser_tensor::TensorError;
use thiserror::Error;

/// Errors surfaced by model construction, forward passes, and training steps.
#[derive(Debug, Error)]
pub enum ModelError {
    /// A tensor-level failure (shape mismatch, bad contraction, ...).
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// The configuration cannot produce a valid architecture.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller violated an API contract (bad labels, inverted domains, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A training step produced a non-finite loss.
    #[error("training diverged: {0}")]
    Training(String),

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An underlying I/O failure while reading or writing checkpoints.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
