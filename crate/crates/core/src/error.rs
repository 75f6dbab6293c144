use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("row {} of the rate matrix sums to {sum:e} (must be 0)", .row + 1)]
    RowSumViolation { row: usize, sum: f64 },

    #[error("negative off-diagonal rate A({},{}) = {value}", .row + 1, .col + 1)]
    NegativeRate { row: usize, col: usize, value: f64 },

    #[error("invalid simplex vector: {0}")]
    InvalidSimplex(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix exponential did not converge")]
    NonConvergedExpm,

    #[error("filter mass {mass:e} below renormalization threshold")]
    DegenerateMass { mass: f64 },

    #[error("covariance norm {norm:e} exceeds blow-up bound")]
    CovarianceBlowup { norm: f64 },

    #[error("grid mismatch: expected {expected} increments, got {got}")]
    GridMismatch { expected: usize, got: usize },

    #[error("optimizer exceeded {iterations} iterations (gradient norm {grad_norm:e})")]
    MaxIterationsExceeded { iterations: usize, grad_norm: f64 },

    #[error("prior covariance is not invertible")]
    SingularPrior,

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("regression condition number {cond:e} exceeds 1e10")]
    IllConditionedRegression { cond: f64 },

    #[error("{features} regression features exceed n_paths/10 for {paths} paths")]
    FeatureCountTooLarge { features: usize, paths: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Errors caused by bad inputs rather than by numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::RowSumViolation { .. }
                | Error::NegativeRate { .. }
                | Error::InvalidSimplex(_)
                | Error::NonFinite(_)
                | Error::DimensionMismatch { .. }
                | Error::GridMismatch { .. }
                | Error::FeatureCountTooLarge { .. }
                | Error::InvalidArgument(_)
                | Error::Parse(_)
                | Error::Io(_)
        )
    }
}
