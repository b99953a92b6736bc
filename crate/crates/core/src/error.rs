use thiserror::Error;

/// Invalid inputs to the numeric kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("no predictions")]
    NoPredictions,
    #[error("prediction {index} is not a finite non-negative number: {value}")]
    InvalidPrediction { index: usize, value: f64 },
    #[error("decay rate beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("no calibration scores")]
    NoScores,
    #[error("calibration score {index} = {value} lies outside (0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("kappa must lie in (0, 1], got {0}")]
    InvalidKappa(f64),
    #[error("threshold value {0} lies outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("candidate set has {0} members, at least 2 are required for gating")]
    TooFewCandidates(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
