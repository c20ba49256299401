use thiserror::Error;

/// Errors raised by the library. Inconclusive certificates are values, not errors.
#[derive(Debug, Error, Clone)]
pub enum NpmleError {
    #[error("weight {index} is not strictly positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("duplicate atom location {0}")]
    DuplicateLocation(f64),
    #[error("weights sum to {0}, expected 1 within 1e-9")]
    WeightSumMismatch(f64),
    #[error("weights and locations have different lengths ({weights} vs {locations})")]
    LengthMismatch { weights: usize, locations: usize },
    #[error("mixture must have at least one atom")]
    EmptyMixture,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("atom counts differ ({0} vs {1})")]
    AtomCountMismatch(usize, usize),
    #[error("dataset must contain at least one point")]
    EmptyDataset,
    #[error("range bound {bound} does not cover max |x| = {max_abs}")]
    RangeBoundTooSmall { bound: f64, max_abs: f64 },
    #[error("derivative order {0} exceeds the supported maximum")]
    OrderTooLarge(usize),
    #[error("explicit bound overflows double precision at L = {0}")]
    BoundOverflow(f64),
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("epsilon {epsilon} must lie in (0, L = {range})")]
    EpsilonOutOfRange { epsilon: f64, range: f64 },
    #[error("extra grid point {0} lies outside [-L, L]")]
    ExtraPointOutOfRange(f64),
    #[error("rounding would drop mass {0} >= 1/2")]
    TooMuchMassDropped(f64),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("support must be non-empty, sorted and distinct")]
    InvalidSupport,
    #[error("candidate atom {0} is not in the static support set")]
    SupportNotInS(f64),
    #[error("jacobian is numerically singular (condition estimate {0:e})")]
    SingularJacobian(f64),
    #[error("EM update made atoms collide or cross")]
    AtomCollision,
    #[error("unknown distribution descriptor `{0}`")]
    UnknownDescriptor(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("refinement exhausted without a proved certificate")]
    RefinementExhausted(Box<crate::pipeline::SolveReport>),
}

pub type Result<T> = std::result::Result<T, NpmleError>;
