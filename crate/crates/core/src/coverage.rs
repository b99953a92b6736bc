//! Monte-Carlo check of the conformal abstention guarantee.
//!
//! Each trial draws `n` calibration scores and one test score from the same
//! distribution, calibrates a threshold and records whether the policy would
//! let the test set through. The escape rate must not exceed κ beyond
//! sampling error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::calibrate;
use crate::error::DomainError;
use crate::seed;

/// z-score of a two-sided 99% normal interval.
const Z_99: f64 = 2.575_829_303_548_901;

/// Source of consistency scores in (0, 1].
pub trait ScoreSampler: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64;
}

/// Uniform on (0, 1].
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformScores;

impl ScoreSampler for UniformScores {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        1.0 - rng.random::<f64>()
    }
}

/// Beta-distributed scores, clamped away from 0.
#[derive(Debug, Clone, Copy)]
pub struct BetaScores {
    dist: Beta<f64>,
}

impl BetaScores {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DomainError> {
        Beta::new(alpha, beta)
            .map(|dist| Self { dist })
            .map_err(|e| DomainError::InvalidParameter(format!("beta sampler: {e}")))
    }
}

impl ScoreSampler for BetaScores {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.dist.sample(rng).max(f64::MIN_POSITIVE)
    }
}

/// Uniform over a finite support, so that calibration ties occur.
#[derive(Debug, Clone)]
pub struct DiscreteScores {
    support: Vec<f64>,
}

impl DiscreteScores {
    pub fn new(support: Vec<f64>) -> Result<Self, DomainError> {
        if support.is_empty() {
            return Err(DomainError::InvalidParameter("empty support".into()));
        }
        if let Some((index, &value)) = support.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
            return Err(DomainError::ScoreOutOfRange { index, value });
        }
        Ok(Self { support })
    }
}

impl ScoreSampler for DiscreteScores {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.support[rng.random_range(0..self.support.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub n: usize,
    pub kappa: f64,
    pub trials: usize,
    pub escapes: usize,
    pub empirical_rate: f64,
    /// Half-width of a 99% normal-approximation binomial interval.
    pub ci_halfwidth: f64,
}

impl CoverageResult {
    /// `κ + 3·sqrt(κ(1−κ)/trials)`.
    pub fn three_sigma_limit(&self) -> f64 {
        self.kappa + 3.0 * (self.kappa * (1.0 - self.kappa) / self.trials as f64).sqrt()
    }
}

pub fn binomial_ci_halfwidth(rate: f64, trials: usize) -> f64 {
    Z_99 * (rate * (1.0 - rate) / trials as f64).sqrt()
}

pub fn coverage_experiment<S: ScoreSampler + ?Sized>(
    sampler: &S,
    n: usize,
    kappa: f64,
    trials: usize,
    seed: u64,
) -> Result<CoverageResult, DomainError> {
    if trials == 0 {
        return Err(DomainError::InvalidParameter("trials must be at least 1".into()));
    }
    if n == 0 {
        return Err(DomainError::NoScores);
    }
    // Surface kappa errors once rather than per trial.
    crate::calibration::order_statistic_index(n, kappa)?;

    let escapes = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<usize, DomainError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[trial as u64]));
            let scores: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
            let test = sampler.sample(&mut rng);
            let model = calibrate(&scores, kappa)?;
            Ok(usize::from(!model.threshold.abstains(test)))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;

    let empirical_rate = escapes as f64 / trials as f64;
    Ok(CoverageResult {
        n,
        kappa,
        trials,
        escapes,
        empirical_rate,
        ci_halfwidth: binomial_ci_halfwidth(empirical_rate, trials),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn always_abstain_branch_never_escapes() {
        let r = coverage_experiment(&UniformScores, 3, 0.2, 2_000, 3).unwrap();
        assert_eq!(r.escapes, 0);
        assert_eq!(r.empirical_rate, 0.0);
        assert_eq!(r.ci_halfwidth, 0.0);
    }

    #[test]
    fn single_trial_rate_is_binary() {
        for seed in 0..20 {
            let r = coverage_experiment(&UniformScores, 10, 0.3, 1, seed).unwrap();
            assert!(r.empirical_rate == 0.0 || r.empirical_rate == 1.0);
        }
    }

    #[test]
    fn kappa_one_is_trivially_bounded() {
        let r = coverage_experiment(&UniformScores, 20, 1.0, 500, 8).unwrap();
        assert!(r.empirical_rate <= 1.0);
        // threshold 0 never abstains on scores in (0, 1]
        assert_eq!(r.escapes, 500);
    }

    #[test]
    fn samplers_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let beta = BetaScores::new(0.3, 0.3).unwrap();
        for _ in 0..10_000 {
            let u = UniformScores.sample(&mut rng);
            let b = beta.sample(&mut rng);
            assert!(u > 0.0 && u <= 1.0);
            assert!(b > 0.0 && b <= 1.0);
        }
        assert!(DiscreteScores::new(vec![0.0]).is_err());
    }

    #[test]
    fn reproducible_with_seed() {
        let a = coverage_experiment(&UniformScores, 30, 0.1, 300, 4).unwrap();
        let b = coverage_experiment(&UniformScores, 30, 0.1, 300, 4).unwrap();
        assert_eq!(a, b);
    }
}
