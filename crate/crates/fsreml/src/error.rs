//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- linalg ----
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not positive semi-definite (eigenvalue {0:.6e})")]
    NonPsd(f64),
    #[error("all eigenvalues fall below the rank tolerance")]
    AllZero,
    #[error("matrix is not positive definite: {0}")]
    NotPd(String),
    #[error("Cholesky factor is singular or was built for a different dimension")]
    SingularFactor,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // ---- penalties ----
    #[error("penalty block [{offset}, {offset_end}) does not fit in dimension {p}")]
    OutOfRange {
        offset: usize,
        offset_end: usize,
        p: usize,
    },
    #[error("smoothing parameter {index} is not strictly positive ({value})")]
    NonPositiveLambda { index: usize, value: f64 },

    // ---- smooths ----
    #[error("basis dimension {k} too small for {need}")]
    InsufficientBasis { k: usize, need: String },
    #[error("covariate '{0}' is degenerate (zero range)")]
    DegenerateCovariate(String),
    #[error("duplicate knots for '{0}': too few distinct covariate values")]
    DuplicateKnots(String),
    #[error("tensor product dimension {got} exceeds cap {cap}")]
    DimensionOverflow { got: usize, cap: usize },
    #[error("random effect factor has a single level")]
    SingleLevel,
    #[error("covariate '{0}' not found in the data")]
    MissingCovariate(String),
    #[error("column '{0}' contains non-finite values")]
    NonFiniteData(String),

    // ---- fitting ----
    #[error("effective degrees of freedom {edf:.3} reach or exceed n = {n}")]
    DegenerateEdf { edf: f64, n: usize },
    #[error("no convergence after {0} outer iterations")]
    MaxIterExceeded(usize),
    #[error("inner Newton solve failed to converge after {0} iterations")]
    NewtonDiverged(usize),

    // ---- likelihoods ----
    #[error("response outside the family support: {0}")]
    SupportViolation(String),
    #[error("survival data contains no events")]
    NoEvents,
    #[error("family/link pair not supported: {0}")]
    InvalidFamilyLink(String),

    // ---- emlab ----
    #[error("EM step degenerate: b + gamma = 0")]
    DegenerateB,
    #[error("accelerated EM root does not exist (b = 0 and empty spectrum)")]
    NoRoot,
    #[error("spectrum size inconsistent with penalty rank: {0}")]
    RankMismatch(String),

    // ---- simulate ----
    #[error("unknown simulation scenario '{0}'")]
    UnknownScenario(String),

    #[error("{0}")]
    Invalid(String),
}
