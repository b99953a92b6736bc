//! Threshold policy and split-conformal threshold calibration.
//!
//! The policy abstains when a candidate set's consistency is at or below the
//! threshold and otherwise picks the candidate predicted to finish soonest.
//! The threshold is calibrated from consistency values of candidate sets
//! whose selected action is known to be hallucinated: with
//! `m = ⌈(n+1)(1−κ)⌉`, the m-th smallest calibration score bounds the
//! probability of letting a hallucinated set through by κ. When `m > n` no
//! finite threshold achieves the bound and the policy always abstains.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{consistency, ConsistencyParams, ConsistencyScore, LookaheadPrediction};
use crate::error::DomainError;
use crate::scalar::Scalar;

/// Consistency threshold γ, or the sentinel for an infinite threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold<T> {
    Finite(T),
    AlwaysAbstain,
}

impl<T: Scalar> Threshold<T> {
    pub fn finite(value: T) -> Result<Self, DomainError> {
        if value.is_finite() && value >= T::zero() && value <= T::one() {
            Ok(Threshold::Finite(value))
        } else {
            Err(DomainError::InvalidThreshold(value.to_f64_lossy()))
        }
    }

    /// True when a set with this consistency must be abstained on.
    pub fn abstains(&self, consistency: T) -> bool {
        match self {
            Threshold::Finite(gamma) => consistency <= *gamma,
            Threshold::AlwaysAbstain => true,
        }
    }

    pub fn value(&self) -> Option<T> {
        match self {
            Threshold::Finite(v) => Some(*v),
            Threshold::AlwaysAbstain => None,
        }
    }

    /// Threshold as a real number, with the sentinel mapped to +∞.
    pub fn as_extended(&self) -> T {
        self.value().unwrap_or_else(T::infinity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Abstain,
    Select,
}

/// Output of the threshold policy for one candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision<T> {
    pub kind: DecisionKind,
    /// 1-based index of the selected candidate; `None` on abstention.
    pub selected_index: Option<usize>,
    /// The argmin candidate, i.e. what would have been selected without the gate.
    pub argmin_index: usize,
    pub consistency: ConsistencyScore<T>,
    /// Number of candidates sharing the minimal prediction.
    pub tie_break_count: usize,
}

impl<T> PolicyDecision<T> {
    pub fn is_abstain(&self) -> bool {
        self.kind == DecisionKind::Abstain
    }
}

/// Applies the threshold policy to a set of lookahead predictions.
///
/// Sets with fewer than two members are rejected: a singleton is trivially
/// unanimous and would bypass the gate.
pub fn decide<T: Scalar>(
    predictions: &[LookaheadPrediction<T>],
    threshold: &Threshold<T>,
    params: &ConsistencyParams<T>,
    rng_seed: u64,
) -> Result<PolicyDecision<T>, DomainError> {
    if predictions.len() < 2 {
        if predictions.is_empty() {
            return Err(DomainError::NoPredictions);
        }
        return Err(DomainError::TooFewCandidates(predictions.len()));
    }
    let score = consistency(predictions, params)?;
    decide_with_score(predictions, score, threshold, rng_seed)
}

/// Applies the gate with an externally computed consistency score.
///
/// Used when hard constraints override the dispersion-based score.
pub fn decide_with_score<T: Scalar>(
    predictions: &[LookaheadPrediction<T>],
    score: ConsistencyScore<T>,
    threshold: &Threshold<T>,
    rng_seed: u64,
) -> Result<PolicyDecision<T>, DomainError> {
    let (argmin_index, tie_break_count) = argmin_with_ties(predictions, rng_seed)?;
    let abstain = threshold.abstains(score.value);
    Ok(PolicyDecision {
        kind: if abstain {
            DecisionKind::Abstain
        } else {
            DecisionKind::Select
        },
        selected_index: (!abstain).then_some(argmin_index),
        argmin_index,
        consistency: score,
        tie_break_count,
    })
}

/// Candidate with the smallest prediction; ties resolved uniformly from the seed.
fn argmin_with_ties<T: Scalar>(
    predictions: &[LookaheadPrediction<T>],
    rng_seed: u64,
) -> Result<(usize, usize), DomainError> {
    let min = predictions
        .iter()
        .map(|p| p.remaining_steps)
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v))))
        .ok_or(DomainError::NoPredictions)?;
    let tied: Vec<usize> = predictions
        .iter()
        .filter(|p| p.remaining_steps == min)
        .map(|p| p.candidate_index)
        .collect();
    let pick = if tied.len() == 1 {
        tied[0]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        tied[rng.random_range(0..tied.len())]
    };
    Ok((pick, tied.len()))
}

/// Calibrated threshold together with the scores it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel<T> {
    /// Calibration consistency values, ascending.
    pub scores: Vec<T>,
    pub n: usize,
    pub kappa: f64,
    /// The order statistic index `⌈(n+1)(1−κ)⌉`.
    pub order_index: u64,
    pub threshold: Threshold<T>,
}

impl<T: Scalar> CalibrationModel<T> {
    /// Guaranteed upper bound on the probability of not abstaining on a
    /// hallucinated set drawn from the calibration distribution.
    pub fn hallucination_budget(&self) -> f64 {
        self.kappa
    }
}

fn validate_kappa(kappa: f64) -> Result<(), DomainError> {
    if kappa.is_finite() && kappa > 0.0 && kappa <= 1.0 {
        Ok(())
    } else {
        Err(DomainError::InvalidKappa(kappa))
    }
}

/// `⌈(n+1)(1−κ)⌉` in floating point.
///
/// Products within a few ulps of an integer are snapped to it, so that
/// e.g. n = 99, κ = 0.05 yields 95 rather than 96.
pub fn order_statistic_index(n: usize, kappa: f64) -> Result<u64, DomainError> {
    validate_kappa(kappa)?;
    let x = (n as f64 + 1.0) * (1.0 - kappa);
    let nearest = x.round();
    let m = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    Ok(m.max(0.0) as u64)
}

/// `⌈(n+1)(1−κ)⌉` in exact rational arithmetic.
pub fn order_statistic_index_rational(n: u64, kappa: Ratio<u64>) -> Result<u64, DomainError> {
    let zero = Ratio::from_integer(0);
    let one = Ratio::from_integer(1);
    if kappa <= zero || kappa > one {
        return Err(DomainError::InvalidKappa(
            *kappa.numer() as f64 / *kappa.denom() as f64,
        ));
    }
    let x = Ratio::from_integer(n + 1) * (one - kappa);
    Ok(x.ceil().to_integer())
}

/// Calibrates the abstention threshold from hallucinated-set scores.
pub fn calibrate<T: Scalar>(scores: &[T], kappa: f64) -> Result<CalibrationModel<T>, DomainError> {
    validate_kappa(kappa)?;
    if scores.is_empty() {
        return Err(DomainError::NoScores);
    }
    for (index, &s) in scores.iter().enumerate() {
        if !(s > T::zero() && s <= T::one()) {
            return Err(DomainError::ScoreOutOfRange {
                index,
                value: s.to_f64_lossy(),
            });
        }
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores validated as finite"));
    let n = sorted.len();
    let m = order_statistic_index(n, kappa)?;
    let threshold = threshold_from_sorted(&sorted, m);
    Ok(CalibrationModel {
        scores: sorted,
        n,
        kappa,
        order_index: m,
        threshold,
    })
}

fn threshold_from_sorted<T: Scalar>(sorted: &[T], m: u64) -> Threshold<T> {
    if m as usize > sorted.len() {
        Threshold::AlwaysAbstain
    } else if m == 0 {
        Threshold::Finite(T::zero())
    } else {
        Threshold::Finite(sorted[m as usize - 1])
    }
}
