//! Dispersion-based consistency of lookahead predictions.
//!
//! Every candidate action in a set comes with a prediction of how many
//! actions remain until the task is complete. The consistency of the set is
//!
//! ```text
//! λ = exp( -(β / N) · Σ_i (T_i − T̄)² )
//! ```
//!
//! where `T̄` is the mean prediction. λ is 1 when every candidate agrees and
//! decays towards 0 as the predictions spread out; `β` sets the decay rate.

use serde::{Deserialize, Serialize};

use crate::error::DomainError;
use crate::scalar::Scalar;

/// Predicted number of actions remaining after applying a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookaheadPrediction<T> {
    /// 1-based position of the candidate in its set.
    pub candidate_index: usize,
    pub remaining_steps: T,
}

impl<T: Scalar> LookaheadPrediction<T> {
    pub fn new(candidate_index: usize, remaining_steps: T) -> Result<Self, DomainError> {
        validate_prediction(candidate_index, remaining_steps)?;
        Ok(Self {
            candidate_index,
            remaining_steps,
        })
    }
}

/// Decay rate of the consistency function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyParams<T> {
    pub beta: T,
}

impl<T: Scalar> ConsistencyParams<T> {
    pub fn new(beta: T) -> Result<Self, DomainError> {
        if !(beta.is_finite() && beta > T::zero()) {
            return Err(DomainError::InvalidBeta(beta.to_f64_lossy()));
        }
        Ok(Self { beta })
    }
}

impl<T: Scalar> Default for ConsistencyParams<T> {
    /// β = 0.9.
    fn default() -> Self {
        Self {
            beta: T::from_f64_lossy(0.9),
        }
    }
}

/// Consistency λ of one candidate set.
///
/// `value` is 0 only when the exponential underflowed, in which case
/// `underflow` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore<T> {
    pub value: T,
    pub n_predictions: usize,
    /// The exponent `-(β/N)·Σ(T_i − T̄)²` before exponentiation.
    pub exponent: T,
    #[serde(default)]
    pub underflow: bool,
}

impl<T: Scalar> ConsistencyScore<T> {
    /// A score with no dispersion at all.
    pub fn unanimous(n_predictions: usize) -> Self {
        Self {
            value: T::one(),
            n_predictions,
            exponent: T::zero(),
            underflow: false,
        }
    }

    /// Score forced to zero, e.g. by a violated hard constraint.
    ///
    /// The exponent is the most negative finite value so the score survives
    /// a JSON round trip.
    pub fn zero(n_predictions: usize) -> Self {
        Self {
            value: T::zero(),
            n_predictions,
            exponent: T::min_value(),
            underflow: false,
        }
    }
}

fn validate_prediction<T: Scalar>(index: usize, value: T) -> Result<(), DomainError> {
    if value.is_finite() && value >= T::zero() {
        Ok(())
    } else {
        Err(DomainError::InvalidPrediction {
            index,
            value: value.to_f64_lossy(),
        })
    }
}

/// Arithmetic mean of the predicted remaining steps.
pub fn mean_prediction<T: Scalar>(predictions: &[LookaheadPrediction<T>]) -> Result<T, DomainError> {
    let values: Vec<T> = predictions.iter().map(|p| p.remaining_steps).collect();
    mean_of(&values)
}

fn mean_of<T: Scalar>(values: &[T]) -> Result<T, DomainError> {
    if values.is_empty() {
        return Err(DomainError::NoPredictions);
    }
    let n = T::from_usize(values.len()).ok_or(DomainError::NoPredictions)?;
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(sum / n)
}

/// Consistency of a candidate set given its lookahead predictions.
pub fn consistency<T: Scalar>(
    predictions: &[LookaheadPrediction<T>],
    params: &ConsistencyParams<T>,
) -> Result<ConsistencyScore<T>, DomainError> {
    let values: Vec<T> = predictions.iter().map(|p| p.remaining_steps).collect();
    consistency_of_values(&values, params)
}

/// Same as [`consistency`] over bare remaining-step values.
pub fn consistency_of_values<T: Scalar>(
    values: &[T],
    params: &ConsistencyParams<T>,
) -> Result<ConsistencyScore<T>, DomainError> {
    if values.is_empty() {
        return Err(DomainError::NoPredictions);
    }
    for (i, &v) in values.iter().enumerate() {
        validate_prediction(i + 1, v)?;
    }
    if !(params.beta.is_finite() && params.beta > T::zero()) {
        return Err(DomainError::InvalidBeta(params.beta.to_f64_lossy()));
    }

    let n = values.len();
    let mean = mean_of(values)?;
    let squared_dev = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .fold(T::zero(), |acc, d| acc + d);
    if squared_dev == T::zero() {
        return Ok(ConsistencyScore::unanimous(n));
    }

    let n_t = T::from_usize(n).ok_or(DomainError::NoPredictions)?;
    let exponent = -(params.beta / n_t) * squared_dev;
    let raw = exponent.exp();
    // Subnormal results are not reproducible across platforms; flush them.
    let (value, underflow) = if raw < T::min_positive_value() {
        (T::zero(), true)
    } else {
        (raw.min(T::one()), false)
    };
    Ok(ConsistencyScore {
        value,
        n_predictions: n,
        exponent,
        underflow,
    })
}
