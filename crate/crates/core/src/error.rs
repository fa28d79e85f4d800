use thiserror::Error;

#[derive(Debug, Error)]
pub enum FgsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite network output")]
    NonFiniteOutput,
    #[error("non-finite latent at timestep {step}")]
    Diverged { step: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = FgsError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> FgsError {
    FgsError::InvalidArgument(msg.into())
}
