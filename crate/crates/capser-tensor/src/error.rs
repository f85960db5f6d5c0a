use thiserror::Error;

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible (mismatched lengths, ranks, or
    /// non-broadcastable dimensions).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A geometric precondition failed (kernel larger than the padded
    /// input, axis out of range, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API contract was violated (non-scalar backward root, dropout
    /// rate out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
