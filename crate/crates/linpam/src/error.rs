//! Crate-wide error type shared by every module.

use thiserror::Error;

/// Everything that can go wrong in model construction, filtering, map
/// fitting, or experiment orchestration.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix whose columns must be independent has numerical rank below
    /// its column count.
    #[error("matrix is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficiency { rank: usize, cols: usize },

    /// An input had a different dimension than the operation requires.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Ensemble statistics need at least two members.
    #[error("ensemble too small: {0} members, need at least 2")]
    EnsembleTooSmall(usize),

    /// The innovation covariance could not be factorized even after jitter
    /// escalation.
    #[error("innovation covariance is numerically singular")]
    SingularInnovationCovariance,

    /// A filter state stopped being finite.
    #[error("filter diverged: non-finite state encountered")]
    Diverged,

    /// A sample set with zero variance cannot support quantile-based
    /// feature sites.
    #[error("degenerate marginal: all samples are identical")]
    DegenerateMarginal,

    /// The adaptive integrator shrank its step below the hard floor.
    #[error("adaptive step size underflow: dt = {dt:e} below {floor:e}")]
    Stiffness { dt: f64, floor: f64 },

    /// Numerical integration produced non-finite values.
    #[error("integration produced non-finite values")]
    NumericalBlowup,

    /// Root bracketing for a monotone map inversion ran out of range.
    #[error("bracket expansion failed while inverting a map component")]
    InversionBracketFailure,

    /// The reduced analysis requires every member to carry the same
    /// invariant value.
    #[error("ensemble invariants differ from the prescribed constant by {max_dev:e} (tolerance {tol:e})")]
    ConstantInvariantViolated { max_dev: f64, tol: f64 },

    /// Every grid point of a tuning sweep diverged.
    #[error("all grid points in the tuning sweep diverged")]
    AllDiverged,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
