use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("text of length {len} exceeds the maximum of {max} positions")]
    Truncation { len: usize, max: usize },
    #[error("{0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss {loss} at step {step}: {detail}")]
    NonFinite { step: usize, loss: f64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
