use alloc::string::String;

/// Errors raised by model construction, filtering and the closed-form oracles.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("model order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("sampling interval must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("diffusion coefficients must be finite and nonnegative (clock {clock}, channel {channel})")]
    InvalidSigma { clock: usize, channel: usize },
    #[error("an ensemble needs at least 2 clocks, got {0}")]
    TooFewClocks(usize),
    #[error("all clocks must share the same model order (clock {clock} has order {found}, expected {expected})")]
    MixedOrders {
        clock: usize,
        expected: usize,
        found: usize,
    },
    #[error("weights must sum to 1 (sum is {0})")]
    WeightsSum(f64),
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} must be symmetric positive semidefinite")]
    NotPsd(&'static str),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("innovation covariance is singular at step {step}")]
    SingularInnovation { step: usize },
    #[error("hypothesis not met: {0}")]
    Hypothesis(String),
    #[error("iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("series of length {len} is too short for averaging factor {factor}")]
    SeriesTooShort { len: usize, factor: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
