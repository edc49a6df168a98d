use da3_gridworld::EnvError;
use da3_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the IQN head needs quantile levels")]
    MissingQuantiles,
    #[error("quantile level {0} is outside (0, 1)")]
    BadQuantile(f64),
    #[error("observation is {got:?}, the network expects {expected:?}")]
    InputMismatch { expected: [usize; 2], got: [usize; 2] },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
