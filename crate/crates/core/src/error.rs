use thiserror::Error;

/// Errors raised by grid construction, coefficient handling and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cylinder does not intersect the grid")]
    EmptyCylinder,

    #[error("invalid exponent: {0}")]
    InvalidExponent(String),

    #[error("exponents violate the critical relation n/p + 2/q = 1 (n = {n}, p = {p}, q = {q})")]
    NotCritical { n: usize, p: f64, q: f64 },

    #[error("expression is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("singular assembly: {0}")]
    SingularAssembly(String),

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolveDiverged { iterations: usize, residual: f64 },

    #[error("non-finite value at time step {step}")]
    NonFinite { step: usize },

    #[error("invalid pole: {0}")]
    InvalidPole(String),

    #[error("invalid epsilon {epsilon}: must be at least {minimum}")]
    EpsilonTooSmall { epsilon: f64, minimum: f64 },

    #[error("mismatched discretizations: {0}")]
    Mismatch(String),

    #[error("incomplete kernel set: {0}")]
    IncompleteKernelSet(String),

    #[error("no admissible samples: {0}")]
    NoSamples(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("cylinder under-resolved: {0}")]
    UnderResolved(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("weighted energy overflow with gamma1 = {gamma1}")]
    Overflow { gamma1: f64 },

    #[error("coefficients depend on time")]
    NonAutonomous,
}

pub type Result<T> = std::result::Result<T, Error>;
