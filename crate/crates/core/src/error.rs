use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("index {index} out of range for grid of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate user id `{0}`")]
    DuplicateUser(String),

    #[error("secret key has no {0} pairs")]
    MissingDomain(&'static str),

    #[error("no thresholds achieve target false-positive rate {target:e} (best achievable {best:e})")]
    NoThreshold { target: f64, best: f64 },

    #[error("non-finite loss at step {step}: {value}")]
    NonFinite { step: usize, value: f64 },

    #[error("unknown attack kind `{0}`")]
    UnknownAttack(String),

    #[error("failed to parse {what} at line {line}, column {column}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
