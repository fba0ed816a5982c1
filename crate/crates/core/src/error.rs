use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The Gram matrix of the design (or of a regression) is numerically singular.
    #[error("rank-deficient design: column {column} is linearly dependent on columns {dependent_on:?}")]
    RankDeficient {
        column: usize,
        dependent_on: Vec<usize>,
    },

    #[error("enumerating {count} assignments exceeds the guard of {limit}; use a sampled variant")]
    EnumerationGuard { count: u128, limit: u128 },

    #[error("variance undefined: {0}")]
    VarianceUndefined(String),

    #[error("imbalance {delta} is not attainable; attainable values are {attainable:?}")]
    UnattainableDelta { delta: f64, attainable: Vec<f64> },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
