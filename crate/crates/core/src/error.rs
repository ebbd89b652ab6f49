use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// `I - A (x) A` is singular or `A` has a unit-modulus eigenvalue.
    #[error("non-stationary dynamics: {0}")]
    Stationarity(String),

    #[error("identification system is singular: {0}")]
    Identification(String),

    /// The unit-variance constraint would need a non-positive innovation variance.
    #[error("infeasible dynamics: {0}")]
    InfeasibleDynamics(String),

    #[error("particle filter degenerated at t = {t}: all weights are zero")]
    FilterDegeneracy { t: usize },

    #[error("estimation failed: {0}")]
    EstimationFailure(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("correlation is undefined for a constant vector")]
    UndefinedCorrelation,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
