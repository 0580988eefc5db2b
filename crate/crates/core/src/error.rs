use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("iteration did not converge after {iterations} steps (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("pair (A, B) is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("matrix is not Schur stable (spectral radius {0})")]
    UnstableMatrix(f64),

    #[error("matrix is not positive semidefinite (minimum eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("KKT system is numerically singular (condition estimate {0:e})")]
    SingularKkt(f64),

    #[error("pair (A, Q1^1/2) is not detectable")]
    NotDetectable,

    #[error("storage shape search stalled at margin {0:e}")]
    FeasibilitySearchFailed(f64),

    #[error("no steady state: (I-A)x - Bu = E mu_W + z is inconsistent (residual {0:e})")]
    NoSteadyState(f64),

    #[error("no gamma in the dyadic grid makes H positive definite")]
    GammaSearchFailed,

    #[error("feedback is infeasible: spectral radius of A+BK is {0}")]
    Infeasible(f64),

    #[error("no restart point is stabilizing")]
    NoStabilizingStart,

    #[error("missing moment block `{0}`")]
    MissingBlock(String),

    #[error("inconsistent policy claim: J_N - N*C is {0:e} < 0")]
    NegativeDelta(f64),

    #[error("invalid problem: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("malformed input: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures of an iterative or numerical routine, as opposed to
    /// malformed or invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SingularKkt(_)
                | Error::FeasibilitySearchFailed(_)
                | Error::GammaSearchFailed
                | Error::NoStabilizingStart
                | Error::UnstableMatrix(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
