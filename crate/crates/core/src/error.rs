use thiserror::Error;

#[derive(Error, Debug)]
pub enum KanError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("drop rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite input at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cache does not match network: {0}")]
    CacheMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient at step {step} (parameter {index})")]
    NonFiniteGradient { step: usize, index: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("unsupported model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KanError>;
