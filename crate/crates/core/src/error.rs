use thiserror::Error;

/// Errors produced by the simulator and learning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid action {action}: must lie in 0..={max}")]
    InvalidAction { action: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid call: {0}")]
    InvalidCall(String),

    #[error("training fault at iteration {iteration}, device {device}: {reason}")]
    TrainingFault {
        iteration: usize,
        device: usize,
        reason: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
