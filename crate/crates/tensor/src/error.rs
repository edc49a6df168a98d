use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: input contains NaN")]
    NaN { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
