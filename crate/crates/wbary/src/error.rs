use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A point does not satisfy the manifold's coordinate invariants.
    #[error("invalid point on {manifold}: {reason}")]
    InvalidPoint { manifold: String, reason: String },

    /// The log map (or a cost Hessian) was requested across a cut locus.
    #[error("cut locus: {0}")]
    CutLocus(String),

    /// A set operation received an empty selection.
    #[error("empty set: reference mass of the selection is zero")]
    EmptySet,

    /// Problem size exceeds a documented solver limit.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Distinct restarts found distinct minimizers with equal objective value.
    #[error("ambiguous barycenter: restarts converged to points {separation:.3e} apart with equal objective")]
    AmbiguousBarycenter { separation: f64 },

    /// The denominator determinant of a distortion coefficient vanished.
    #[error("singular denominator in distortion coefficient (det = {0:.3e})")]
    SingularDenominator(f64),

    /// A curvature-dimension hypothesis required by a check does not hold.
    #[error("curvature-dimension condition violated: K = {k:.6} < 0")]
    CdViolated { k: f64 },

    /// Too many skipped atoms/tuples for the check to be meaningful.
    #[error("inconclusive: {0}")]
    Inconclusive(String),

    /// The check's hypotheses are not met by the input (not an error in the input itself).
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// Requested a feature outside the supported closed-form families.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Malformed input data (weights, masses, dimensions).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
