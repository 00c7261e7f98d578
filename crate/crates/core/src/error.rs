use thiserror::Error;

/// Errors raised by the estimation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid bandwidth {0}: bandwidths must be strictly positive and finite")]
    InvalidBandwidth(f64),

    #[error("degenerate data: all pairwise distances are zero; supply an explicit bandwidth")]
    DegenerateData,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("sample size too small: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("unequal sample sizes {0} and {1}: the paired U-statistic needs equal sizes")]
    UnequalSizes(usize, usize),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("invalid noise model: {0}")]
    InvalidNoise(String),

    #[error("unsupported: no closed form exposed for {0}")]
    Unsupported(String),

    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),

    #[error("invalid response value {0}: expected 0 or 1")]
    InvalidResponse(f64),

    #[error("non-finite parameters at iteration {iteration}; last finite parameters {last_finite:?}")]
    NonFinite {
        iteration: usize,
        last_finite: Vec<f64>,
    },

    #[error("curvature not invertible (condition number {condition:.3e})")]
    CurvatureNotInvertible { condition: f64 },

    #[error("separation/degenerate: {0}")]
    Separation(String),

    #[error("zero-variance covariate")]
    ZeroVariance,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            name,
            reason: format!("must be positive and finite, got {value}"),
        })
    }
}
