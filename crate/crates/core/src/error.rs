use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("theta {theta} outside [1, {upper}]")]
    InvalidTheta { theta: f64, upper: f64 },

    #[error("curvature bound must be nonnegative, got {0}")]
    NegativeCurvatureBound(f64),

    #[error("barrier evaluated to a non-finite value at sample {sample}")]
    DegenerateBarrier { sample: usize },

    #[error("margin c_J = {c_j} outside [0, {upper}]")]
    MarginOutOfRange { c_j: f64, upper: f64 },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("log-sum-exp temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("barrier is incompatible with filter mode: {0}")]
    IncompatibleBarrier(String),

    #[error("constraint is not concave in the input")]
    NonConcaveConstraint,

    #[error("solver exceeded {0} iterations")]
    MaxIterExceeded(usize),

    #[error("no input satisfies the constraint (best achievable slack {max_slack})")]
    Infeasible { max_slack: f64 },

    #[error("invalid counts: {successes} successes out of {trials} trials")]
    InvalidCounts { successes: u64, trials: u64 },

    #[error("invalid confidence level {0}")]
    InvalidConfidence(f64),

    #[error("trial {trial}: filter infeasible at step {step} (best achievable slack {max_slack})")]
    ControllerInfeasible { trial: usize, step: usize, max_slack: f64 },

    #[error("trial {trial}: state became non-finite at step {step}")]
    NonFiniteState { trial: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
