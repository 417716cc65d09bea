use crate::graph::Violation;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("graph failed validation ({} violation(s)): {}", .0.len(), summarize(.0))]
    InvalidGraph(Vec<Violation>),

    #[error("edit rejected: {0}")]
    InvalidEdit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite {what} loss at step {step}")]
    NonFinite { step: u64, what: &'static str },

    #[error("metric: {0}")]
    Metric(String),

    #[error("scene sampling: {0}")]
    Sampling(String),

    #[error("infeasible edit pair: {0}")]
    Infeasible(String),

    #[error("config: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

fn summarize(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
