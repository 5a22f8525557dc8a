use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pseudo labels missing: run generate_pseudo_labels (or enable controlled pseudo noise) before {0}")]
    MissingPseudoLabels(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate weights: pair sum {0} is at or below 1e-15")]
    DegenerateWeights(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
