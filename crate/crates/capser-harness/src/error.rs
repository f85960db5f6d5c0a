//! Error type shared across the harness.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] capser_model::ModelError),

    #[error(transparent)]
    Audio(#[from] capser_audio::AudioError),

    #[error(transparent)]
    Tensor(#[from] capser_tensor::TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A run or corpus configuration that cannot be executed.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file on disk does not parse as the expected format.
    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },
}

impl HarnessError {
    pub(crate) fn data(path: impl std::fmt::Display, message: impl Into<String>) -> Self {
        HarnessError::Data {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
