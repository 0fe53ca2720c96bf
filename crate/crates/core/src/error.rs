use thiserror::Error;
use tokcomm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl From<CoreError> for TensorError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        }
    }
}
