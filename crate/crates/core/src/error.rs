use thiserror::Error;

/// Errors produced by the fieldstat pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input is missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("input contains no data rows")]
    EmptyInput,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("row alignment failed: {0}")]
    AlignmentFailure(String),

    #[error("edge trimming removed every cell")]
    EmptyInterior,

    #[error("design error: {0}")]
    Design(String),

    #[error("rank-deficient system: {0}")]
    Rank(String),

    #[error("covariance matrix is not positive definite at theta = {theta:?}")]
    IllConditioned { theta: Vec<f64> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no lag has enough qualifying pairs for a variogram")]
    EmptyVariogram,

    #[error("every REML start failed: {}", .diagnostics.join("; "))]
    FitFailure { diagnostics: Vec<String> },

    #[error("malformed grid file: {0}")]
    MalformedGrid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
