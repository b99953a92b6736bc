//! Numeric core of the consistency-gated planner.
//!
//! * [`consistency`]: dispersion-based consistency of lookahead predictions.
//! * [`calibration`]: the abstention policy and conformal threshold calibration.
//! * [`bandit`] and [`coverage`]: simulators for the regret and
//!   hallucination-escape guarantees.
//!
//! The kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by the planner.

pub mod bandit;
pub mod calibration;
pub mod consistency;
pub mod coverage;
pub mod error;
pub mod scalar;
pub mod seed;

pub use bandit::{
    regret_bound, simulate_regret, simulate_regret_with, thompson_step, BanditEnv, BanditPolicy,
    BetaPosterior, RegretTrace, ThompsonStep,
};
pub use calibration::{
    calibrate, decide, decide_with_score, order_statistic_index, order_statistic_index_rational,
    CalibrationModel, DecisionKind, PolicyDecision, Threshold,
};
pub use consistency::{
    consistency, consistency_of_values, mean_prediction, ConsistencyParams, ConsistencyScore,
    LookaheadPrediction,
};
pub use coverage::{
    coverage_experiment, BetaScores, CoverageResult, DiscreteScores, ScoreSampler, UniformScores,
};
pub use error::DomainError;
pub use scalar::Scalar;

pub type Prediction = LookaheadPrediction<f64>;
pub type Params = ConsistencyParams<f64>;
pub type Score = ConsistencyScore<f64>;
pub type Gamma = Threshold<f64>;
pub type Decision = PolicyDecision<f64>;
pub type Calibration = CalibrationModel<f64>;

pub type Prediction32 = LookaheadPrediction<f32>;
pub type Params32 = ConsistencyParams<f32>;
pub type Score32 = ConsistencyScore<f32>;
pub type Gamma32 = Threshold<f32>;
pub type Decision32 = PolicyDecision<f32>;
pub type Calibration32 = CalibrationModel<f32>;
