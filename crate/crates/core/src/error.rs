use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid reference distribution: {0}")]
    InvalidDistribution(String),

    #[error("target mean {target} is outside the open support hull ({lower}, {upper})")]
    TargetOutsideHull { target: f64, lower: f64, upper: f64 },

    #[error("tilt solver stopped after {iterations} iterations with residual {residual:e}")]
    ToleranceNotReached { iterations: usize, residual: f64 },

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("responses at indices {indices:?} are not atoms of the reference distribution")]
    OffSupportResponse { indices: Vec<usize> },

    #[error("fitted mean {mean} at observation {index} is outside the support hull ({lower}, {upper})")]
    ConstraintViolation {
        index: usize,
        mean: f64,
        lower: f64,
        upper: f64,
    },

    #[error("no step keeps all fitted means inside the response hull")]
    HullViolation,

    #[error("all responses are identical")]
    DegenerateResponse,

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("no convergence after {iterations} iterations: {reason}")]
    NonConvergence { iterations: usize, reason: String },

    #[error("true parameter {index} is zero; relative error undefined")]
    ZeroTrueParameter { index: usize },

    #[error("estimator {estimator} failed on {failures} of {reps} replicates")]
    TooManyFailures {
        estimator: String,
        failures: usize,
        reps: usize,
    },
}
