use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("degenerate direction: vector norm {0:e} is below 1e-12")]
    DegenerateDirection(f64),

    #[error("insufficient local data at u = {at}: kernel mass {mass:e}")]
    InsufficientLocalData { at: f64, mass: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite function value: {0}")]
    NonFinite(String),

    #[error("correlation parameter out of range: {0}")]
    ParameterRange(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("study failed: {0}")]
    StudyFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
