//! Feedback on the action the policy would have taken when it abstains.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, RecoveryState};
use crate::harness::{judge_action, GroundTruthPlan, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    ScriptedOracle,
    DigitalTwinStub,
    Human,
}

/// An evaluation of one proposed action at a given (stage, iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub stage: usize,
    pub icl_iteration: usize,
    pub action: Action,
    pub verdict: Verdict,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    pub provider: ProviderKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError {
    #[error("feedback rationale must not be empty")]
    EmptyRationale,
    #[error("feedback reward must be finite, got {0}")]
    NonFiniteReward(f64),
}

impl FeedbackRecord {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.rationale.trim().is_empty() {
            return Err(FeedbackError::EmptyRationale);
        }
        if let Some(r) = self.reward {
            if !r.is_finite() {
                return Err(FeedbackError::NonFiniteReward(r));
            }
        }
        Ok(())
    }

    /// The numeric reward, defaulting to 1 for effective and 0 for
    /// ineffective verdicts.
    pub fn reward_or_default(&self) -> f64 {
        self.reward.unwrap_or(match self.verdict {
            Verdict::Effective => 1.0,
            Verdict::Ineffective => 0.0,
        })
    }

    /// The text added to the prompt context.
    pub fn context_note(&self) -> String {
        let verdict = match self.verdict {
            Verdict::Effective => "effective",
            Verdict::Ineffective => "ineffective",
        };
        format!(
            "The proposed action \"{}\" was evaluated as {}: {}",
            self.action.action_text,
            verdict,
            self.rationale.trim()
        )
    }
}

/// What a provider is asked to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub stage: usize,
    pub icl_iteration: usize,
    pub action: Action,
    pub candidate_index: usize,
    pub state: RecoveryState,
}

/// A provider's answer before it is stamped with the session cursor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDraft {
    pub verdict: Verdict,
    pub rationale: String,
    pub reward: Option<f64>,
    pub provider: ProviderKind,
}

impl FeedbackDraft {
    pub fn into_record(self, request: &FeedbackRequest) -> FeedbackRecord {
        FeedbackRecord {
            stage: request.stage,
            icl_iteration: request.icl_iteration,
            action: request.action.clone(),
            verdict: self.verdict,
            rationale: self.rationale,
            reward: self.reward,
            provider: self.provider,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackOutcome {
    Ready(FeedbackDraft),
    /// The provider answers later (or never); the session parks.
    Unavailable,
}

pub trait FeedbackProvider: Send {
    fn kind(&self) -> ProviderKind;
    fn evaluate(&mut self, request: &FeedbackRequest) -> FeedbackOutcome;
}

/// Replays a fixed queue of verdicts.
#[derive(Debug, Clone, Default)]
pub struct ScriptedOracle {
    queue: VecDeque<(Verdict, String, Option<f64>)>,
}

impl ScriptedOracle {
    pub fn new(entries: impl IntoIterator<Item = (Verdict, String)>) -> Self {
        Self {
            queue: entries.into_iter().map(|(v, r)| (v, r, None)).collect(),
        }
    }

    pub fn with_rewards(entries: impl IntoIterator<Item = (Verdict, String, Option<f64>)>) -> Self {
        Self {
            queue: entries.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }
}

impl FeedbackProvider for ScriptedOracle {
    fn kind(&self) -> ProviderKind {
        ProviderKind::ScriptedOracle
    }

    fn evaluate(&mut self, _request: &FeedbackRequest) -> FeedbackOutcome {
        match self.queue.pop_front() {
            Some((verdict, rationale, reward)) => FeedbackOutcome::Ready(FeedbackDraft {
                verdict,
                rationale,
                reward,
                provider: ProviderKind::ScriptedOracle,
            }),
            None => FeedbackOutcome::Unavailable,
        }
    }
}

/// Evaluates actions against a ground-truth plan in place of a digital twin.
#[derive(Debug, Clone)]
pub struct DigitalTwinStub {
    plan: GroundTruthPlan,
}

impl DigitalTwinStub {
    pub fn new(plan: GroundTruthPlan) -> Self {
        Self { plan }
    }
}

impl FeedbackProvider for DigitalTwinStub {
    fn kind(&self) -> ProviderKind {
        ProviderKind::DigitalTwinStub
    }

    fn evaluate(&mut self, request: &FeedbackRequest) -> FeedbackOutcome {
        let judgement = judge_action(&request.action, &self.plan, &request.state);
        let rationale = match judgement.matched_step {
            Some(step) => {
                let criteria: Vec<&str> = self.plan.steps[step]
                    .criteria_satisfied
                    .iter()
                    .map(|c| c.name())
                    .collect();
                format!(
                    "Executing the action in the replica makes the system {}.",
                    criteria.join(" and ")
                )
            }
            None => {
                let next = request
                    .state
                    .unmet()
                    .next()
                    .map(|c| format!(" The next open objective is to {}.", c.objective()))
                    .unwrap_or_default();
                format!("Executing the action in the replica does not change the recovery state.{next}")
            }
        };
        FeedbackOutcome::Ready(FeedbackDraft {
            verdict: judgement.verdict,
            rationale,
            reward: None,
            provider: ProviderKind::DigitalTwinStub,
        })
    }
}

/// Feedback from an operator arrives asynchronously through the control plane.
#[derive(Debug, Clone, Copy, Default)]
pub struct HumanProvider;

impl FeedbackProvider for HumanProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Human
    }

    fn evaluate(&mut self, _request: &FeedbackRequest) -> FeedbackOutcome {
        FeedbackOutcome::Unavailable
    }
}

/// Serves previously recorded feedback in order; used for replay.
#[derive(Debug, Clone, Default)]
pub struct RecordedFeedback {
    records: VecDeque<FeedbackRecord>,
}

impl RecordedFeedback {
    pub fn new(records: impl IntoIterator<Item = FeedbackRecord>) -> Self {
        Self {
            records: records.into_iter().collect(),
        }
    }
}

impl FeedbackProvider for RecordedFeedback {
    fn kind(&self) -> ProviderKind {
        self.records
            .front()
            .map_or(ProviderKind::ScriptedOracle, |r| r.provider)
    }

    fn evaluate(&mut self, _request: &FeedbackRequest) -> FeedbackOutcome {
        match self.records.pop_front() {
            Some(r) => FeedbackOutcome::Ready(FeedbackDraft {
                verdict: r.verdict,
                rationale: r.rationale,
                reward: r.reward,
                provider: r.provider,
            }),
            None => FeedbackOutcome::Unavailable,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Criterion;
    use crate::harness::PlanStep;

    fn request(text: &str) -> FeedbackRequest {
        FeedbackRequest {
            stage: 0,
            icl_iteration: 0,
            action: Action::generated(text, ""),
            candidate_index: 1,
            state: RecoveryState::default(),
        }
    }

    #[test]
    fn twin_stub_judges_against_plan() {
        let mut twin = DigitalTwinStub::new(GroundTruthPlan {
            steps: vec![PlanStep {
                action_text: "Isolate".into(),
                criteria_satisfied: vec![Criterion::Contained],
                equivalence_hints: vec!["isolate".into()],
            }],
        });
        let FeedbackOutcome::Ready(good) = twin.evaluate(&request("Isolate the host")) else {
            panic!("twin always answers");
        };
        assert_eq!(good.verdict, Verdict::Effective);
        assert!(good.rationale.contains("contained"));
        let FeedbackOutcome::Ready(bad) = twin.evaluate(&request("Write a report")) else {
            panic!("twin always answers");
        };
        assert_eq!(bad.verdict, Verdict::Ineffective);
        assert!(bad.rationale.contains("contain the attack"));
    }

    #[test]
    fn oracle_drains_then_unavailable() {
        let mut o = ScriptedOracle::new([(Verdict::Ineffective, "no".to_string())]);
        assert!(matches!(o.evaluate(&request("x")), FeedbackOutcome::Ready(_)));
        assert_eq!(o.evaluate(&request("x")), FeedbackOutcome::Unavailable);
        assert_eq!(HumanProvider.evaluate(&request("x")), FeedbackOutcome::Unavailable);
    }

    #[test]
    fn reward_mapping_and_validation() {
        let draft = FeedbackDraft {
            verdict: Verdict::Effective,
            rationale: "ok".into(),
            reward: None,
            provider: ProviderKind::Human,
        };
        let mut rec = draft.into_record(&request("x"));
        assert_eq!(rec.reward_or_default(), 1.0);
        rec.verdict = Verdict::Ineffective;
        assert_eq!(rec.reward_or_default(), 0.0);
        rec.reward = Some(0.25);
        assert_eq!(rec.reward_or_default(), 0.25);
        rec.reward = Some(f64::NAN);
        assert!(rec.validate().is_err());
        rec.reward = None;
        rec.rationale = " ".into();
        assert_eq!(rec.validate(), Err(FeedbackError::EmptyRationale));
    }
}
