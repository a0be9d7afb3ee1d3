use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid edge ({i}, {j}, {w}): {reason}")]
    InvalidEdge {
        i: usize,
        j: usize,
        w: f64,
        reason: &'static str,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value {value} at {context}")]
    NonFinite { context: String, value: f64 },

    #[error("matrix is not positive definite at max jitter (min eigenvalue {min_eig:e})")]
    NonPsd { min_eig: f64 },

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
