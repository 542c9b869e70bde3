use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("softmax slice has no finite entry")]
    DegenerateSlice,
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("finite-difference probe error: {0}")]
    Probe(String),
}

impl TensorError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        TensorError::Dimension(msg.into())
    }
}
