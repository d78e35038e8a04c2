use cen_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CenError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Inconsistent topology, variant or hyperparameter choice.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    /// Corrupt or mismatched dataset/checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}: first non-finite parameter is {param}")]
    NonFinite { step: u64, param: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CenError>;
