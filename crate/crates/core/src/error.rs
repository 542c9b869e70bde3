use spt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SptError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prompt: at least one point, box or mask is required")]
    MissingPrompt,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("no defect region available")]
    NoDefect,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("zero column norm in DoRA direction at column {0}")]
    DegenerateDirection(usize),
    #[error("adapter attachments cannot be merged into a weight matrix")]
    UnsupportedMerge,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("training diverged at epoch {epoch}, step {step}; parameters reset to the last completed epoch")]
    /// `epoch` and `step` are 1-based, as in the training log.
    Diverged { epoch: usize, step: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SptError> = std::result::Result<T, E>;
