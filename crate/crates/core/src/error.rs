use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,

    #[error("backward requires a tracked scalar loss, got {0}")]
    NotScalarLoss(String),

    #[error("invalid probability density cloud: {0}")]
    InvalidPdc(String),

    #[error("undefined angle: {0}")]
    UndefinedAngle(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("invalid structure: {0}")]
    Structure(String),

    #[error("mutation {token}: {reason}")]
    Mutation { token: String, reason: String },

    #[error("mask region: {0}")]
    Mask(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
