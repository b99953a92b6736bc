//! Bernoulli bandit simulator for the regret behaviour of feedback-driven
//! refinement.
//!
//! Each refinement round is modelled as one pull of a multi-armed bandit
//! whose arms are the candidate actions. When the generator samples actions
//! from the posterior over the optimal action, the loop behaves like Thompson
//! sampling, so its Bayesian regret after K rounds is bounded by
//! `C·sqrt(|A|·K·ln K)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::DomainError;
use crate::seed;

/// Bandit with Bernoulli arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEnv {
    reward_means: Vec<f64>,
}

impl BanditEnv {
    pub fn new(reward_means: Vec<f64>) -> Result<Self, DomainError> {
        if reward_means.is_empty() {
            return Err(DomainError::InvalidParameter("bandit needs at least one arm".into()));
        }
        if let Some(bad) = reward_means.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(DomainError::InvalidParameter(format!(
                "arm mean {bad} outside [0, 1]"
            )));
        }
        Ok(Self { reward_means })
    }

    /// `arms` means evenly spaced over `[low, high]`.
    pub fn evenly_spaced(arms: usize, low: f64, high: f64) -> Result<Self, DomainError> {
        if arms == 0 {
            return Err(DomainError::InvalidParameter("bandit needs at least one arm".into()));
        }
        let means = if arms == 1 {
            vec![high]
        } else {
            let step = (high - low) / (arms - 1) as f64;
            (0..arms).map(|i| low + step * i as f64).collect()
        };
        Self::new(means)
    }

    pub fn arms(&self) -> usize {
        self.reward_means.len()
    }

    pub fn reward_means(&self) -> &[f64] {
        &self.reward_means
    }

    pub fn optimal_mean(&self) -> f64 {
        self.reward_means.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn pull<R: Rng + ?Sized>(&self, arm: usize, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.reward_means[arm] {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-arm Beta posterior over Bernoulli success probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BetaPosterior {
    /// Beta(1, 1) prior on every arm.
    pub fn uniform(arms: usize) -> Self {
        Self {
            alpha: vec![1.0; arms],
            beta: vec![1.0; arms],
        }
    }

    /// Total number of updates applied since the uniform prior.
    pub fn observations(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| (a - 1.0) + (b - 1.0))
            .sum()
    }
}

/// Outcome of one Thompson sampling round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThompsonStep {
    /// 0-based arm index.
    pub arm: usize,
    pub reward: f64,
    /// `optimal_mean − mean(arm)`.
    pub regret: f64,
}

/// Draws one sample per arm, plays the argmax, observes a Bernoulli reward
/// and updates the posterior in place.
pub fn thompson_step<R: Rng + ?Sized>(
    posterior: &mut BetaPosterior,
    env: &BanditEnv,
    rng: &mut R,
) -> ThompsonStep {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (arm, (&a, &b)) in posterior.alpha.iter().zip(&posterior.beta).enumerate() {
        let draw = Beta::new(a, b).expect("posterior parameters stay positive").sample(rng);
        if draw > best.1 {
            best = (arm, draw);
        }
    }
    let arm = best.0;
    let reward = env.pull(arm, rng);
    if reward > 0.0 {
        posterior.alpha[arm] += 1.0;
    } else {
        posterior.beta[arm] += 1.0;
    }
    ThompsonStep {
        arm,
        reward,
        regret: env.optimal_mean() - env.reward_means[arm],
    }
}

/// Arm selection rule used by [`simulate_regret_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditPolicy {
    Thompson,
    UniformRandom,
}

/// Mean regret curve over independent runs, together with the reference bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub horizon: usize,
    pub arms: usize,
    pub constant: f64,
    /// Entry `k-1` is the mean instantaneous regret at iteration k.
    pub per_iteration_regret: Vec<f64>,
    /// Running sum of `per_iteration_regret`.
    pub cumulative: Vec<f64>,
    /// Entry `k-2` is `C·sqrt(|A|·k·ln k)` for k = 2..=K.
    pub bound: Vec<f64>,
}

impl RegretTrace {
    /// Builds a trace from per-iteration regrets, filling in the running sum
    /// and the bound curve.
    pub fn from_per_iteration(per_iteration_regret: Vec<f64>, arms: usize, constant: f64) -> Self {
        let horizon = per_iteration_regret.len();
        let cumulative = per_iteration_regret
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        let bound = (2..=horizon).map(|k| regret_bound(constant, arms, k)).collect();
        Self {
            horizon,
            arms,
            constant,
            per_iteration_regret,
            cumulative,
            bound,
        }
    }

    /// Cumulative regret after k iterations (1-based).
    pub fn cumulative_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.cumulative.get(i)).copied()
    }

    pub fn bound_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(2).and_then(|i| self.bound.get(i)).copied()
    }

    /// `(k, cumulative regret, bound)` for k = 2..=K.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (2..=self.horizon).map(move |k| (k, self.cumulative[k - 1], self.bound[k - 2]))
    }

    /// First k in [2, K] where the cumulative regret exceeds the bound.
    pub fn first_bound_violation(&self) -> Option<usize> {
        self.rows().find(|(_, r, b)| r > b).map(|(k, _, _)| k)
    }
}

/// `C·sqrt(|A|·k·ln k)`.
pub fn regret_bound(constant: f64, arms: usize, k: usize) -> f64 {
    let k = k as f64;
    constant * (arms as f64 * k * k.ln()).max(0.0).sqrt()
}

/// Thompson sampling regret averaged over `runs` seeded runs.
pub fn simulate_regret(
    env: &BanditEnv,
    horizon: usize,
    runs: usize,
    constant: f64,
    seed: u64,
) -> Result<RegretTrace, DomainError> {
    simulate_regret_with(BanditPolicy::Thompson, env, horizon, runs, constant, seed)
}

pub fn simulate_regret_with(
    policy: BanditPolicy,
    env: &BanditEnv,
    horizon: usize,
    runs: usize,
    constant: f64,
    seed: u64,
) -> Result<RegretTrace, DomainError> {
    if horizon < 2 {
        return Err(DomainError::InvalidParameter(format!(
            "horizon must be at least 2, got {horizon}"
        )));
    }
    if runs == 0 {
        return Err(DomainError::InvalidParameter("runs must be at least 1".into()));
    }
    if !(constant.is_finite() && constant > 0.0) {
        return Err(DomainError::InvalidParameter(format!(
            "bound constant must be positive, got {constant}"
        )));
    }

    let per_run: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[run as u64]));
            single_run(policy, env, horizon, &mut rng)
        })
        .collect();

    let mut mean = vec![0.0; horizon];
    for run in &per_run {
        for (m, r) in mean.iter_mut().zip(run) {
            *m += r;
        }
    }
    for m in &mut mean {
        *m /= runs as f64;
    }
    Ok(RegretTrace::from_per_iteration(mean, env.arms(), constant))
}

fn single_run(policy: BanditPolicy, env: &BanditEnv, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let optimal = env.optimal_mean();
    match policy {
        BanditPolicy::Thompson => {
            let mut posterior = BetaPosterior::uniform(env.arms());
            (0..horizon)
                .map(|_| thompson_step(&mut posterior, env, rng).regret)
                .collect()
        }
        BanditPolicy::UniformRandom => (0..horizon)
            .map(|_| {
                let arm = rng.random_range(0..env.arms());
                let _ = env.pull(arm, rng);
                optimal - env.reward_means[arm]
            })
            .collect(),
    }
}
