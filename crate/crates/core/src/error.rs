use thiserror::Error;

#[derive(Debug, Error)]
pub enum AidError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing peers: {0}")]
    MissingPeers(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("optimization error: objective returned {value} at alpha={alpha}, beta={beta}")]
    Objective { alpha: f64, beta: f64, value: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AidError>;
