use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Two operands disagree on the size of a named axis.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at coordinate {index} ({detail})")]
    NonFinite { index: usize, detail: String },
}
