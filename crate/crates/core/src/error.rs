use thiserror::Error;

/// Errors raised by model construction, estimation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("subject {subject}, occasion {occasion}: covariate X is missing and no override was supplied")]
    MissingCovariate { subject: String, occasion: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("response category {category} is never observed; the model cannot be identified")]
    DegenerateCategory { category: usize },

    #[error("no usable occasions in the data")]
    NoUsableOccasions,

    #[error("positivity violation: subject {subject}, occasion {occasion}, pi = {pi:.3e} is below the floor {floor:.1e}")]
    Positivity {
        subject: String,
        occasion: usize,
        pi: f64,
        floor: f64,
    },

    #[error("not identifiable: {0}")]
    NotIdentifiable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
