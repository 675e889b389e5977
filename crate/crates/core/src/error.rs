use thiserror::Error;

/// Errors raised across problem construction, sampling, solving and spectral analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficient Jacobian: sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e}")]
    RankDeficient { sigma_min: f64, sigma_max: f64 },

    #[error("consistency violated: {what} residual {residual:e} exceeds tolerance {tol:e}")]
    Inconsistent { what: &'static str, residual: f64, tol: f64 },

    #[error("Hessian is not symmetric positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("singular block: Gram matrix of the sampled rows has no usable spectrum")]
    SingularBlock,

    #[error("exact enumeration needs {count} subsets, budget is {budget}")]
    BudgetExceeded { count: u64, budget: u64 },

    #[error("expected projector is ill conditioned: lambda_min = {min:e}, lambda_max = {max:e}")]
    IllConditionedPbar { min: f64, max: f64 },

    #[error("every grid point diverged")]
    AllDiverged,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
