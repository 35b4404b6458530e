use thiserror::Error;

/// Errors raised by the beam-alignment library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions disagree.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// The requested Shapley estimator cannot handle the problem size.
    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("build error: {0}")]
    Build(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
