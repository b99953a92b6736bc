//! Candidate generation and lookahead prediction on top of a [`Backend`].

use std::sync::Arc;

use conplan_core::{seed, LookaheadPrediction};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::action::Action;
use crate::backend::{Backend, BackendError, CompletionRequest, RequestPurpose};
use crate::parse::{parse_action, parse_completion_answer, parse_remaining_steps, ParseError};
use crate::prompt::{render_prompt, PromptContext, PromptPurpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based position in the set; equals the request index.
    pub index: usize,
    pub action: Action,
    pub prediction: Option<LookaheadPrediction<f64>>,
    /// The lookahead reply was unusable and the prediction was imputed.
    #[serde(default)]
    pub prediction_imputed: bool,
}

/// The candidate actions generated for one (stage, refinement iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub stage: usize,
    pub icl_iteration: usize,
    pub members: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Lookahead predictions of all members, failing if any is missing.
    pub fn predictions(&self) -> Result<Vec<LookaheadPrediction<f64>>, GatewayError> {
        self.members
            .iter()
            .map(|m| m.prediction.ok_or(GatewayError::MissingPrediction { index: m.index }))
            .collect()
    }

    pub fn member(&self, index: usize) -> Option<&Candidate> {
        index.checked_sub(1).and_then(|i| self.members.get(i))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("backend failed on {purpose:?} request {slot}: {source}")]
    Backend {
        purpose: RequestPurpose,
        slot: usize,
        #[source]
        source: BackendError,
    },
    #[error("generation {slot} stayed unparseable after retries: {source}")]
    GenerationExhausted {
        slot: usize,
        #[source]
        source: ParseError,
    },
    #[error("no lookahead prediction could be parsed")]
    LookaheadExhausted,
    #[error("candidate {index} has no lookahead prediction")]
    MissingPrediction { index: usize },
    #[error("completion check reply unusable: {0}")]
    CompletionUnparseable(#[source] ParseError),
    #[error("candidate count must be at least 1")]
    NoCandidates,
}

impl GatewayError {
    pub fn is_generation_exhausted(&self) -> bool {
        matches!(self, GatewayError::GenerationExhausted { .. } | GatewayError::LookaheadExhausted)
    }
}

enum SlotOutcome<T> {
    Parsed(T),
    Unparseable(ParseError),
    Failed(BackendError),
}

/// Issues prompts to a backend and turns replies into candidate sets.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend }
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    fn retry_budget(&self) -> u32 {
        self.backend.descriptor().retry_budget
    }

    /// Generates `n` candidates and one lookahead prediction per candidate.
    ///
    /// All generation requests go out as one concurrent batch, followed by
    /// one batch of lookahead requests. Member `i` always corresponds to
    /// request `i`.
    pub fn generate_candidates(
        &self,
        context: &PromptContext,
        n: usize,
        stage: usize,
        icl_iteration: usize,
        rng_seed: u64,
    ) -> Result<CandidateSet, GatewayError> {
        if n == 0 {
            return Err(GatewayError::NoCandidates);
        }
        let descriptor = self.backend.descriptor();
        let prompt = render_prompt(context, PromptPurpose::GenerateAction);
        let requests: Vec<CompletionRequest> = (0..n)
            .map(|slot| CompletionRequest {
                purpose: RequestPurpose::GenerateAction,
                prompt: prompt.clone(),
                temperature: descriptor.temperature,
                max_tokens: descriptor.max_output_tokens,
                seed: seed::derive(rng_seed, &[0, slot as u64]),
            })
            .collect();
        let generated = self.run_slots(requests, parse_action);

        let mut actions = Vec::with_capacity(n);
        for (slot, outcome) in generated.into_iter().enumerate() {
            match outcome {
                SlotOutcome::Parsed(a) => actions.push(a),
                SlotOutcome::Failed(source) => {
                    return Err(GatewayError::Backend {
                        purpose: RequestPurpose::GenerateAction,
                        slot: slot + 1,
                        source,
                    })
                }
                SlotOutcome::Unparseable(source) => {
                    return Err(GatewayError::GenerationExhausted { slot: slot + 1, source })
                }
            }
        }

        let lookahead_requests: Vec<CompletionRequest> = actions
            .iter()
            .enumerate()
            .map(|(slot, action)| CompletionRequest {
                purpose: RequestPurpose::PredictLookahead,
                prompt: render_prompt(context, PromptPurpose::PredictLookahead(action)),
                temperature: descriptor.lookahead_temperature,
                max_tokens: descriptor.max_output_tokens,
                seed: seed::derive(rng_seed, &[1, slot as u64]),
            })
            .collect();
        let lookaheads = self.run_slots(lookahead_requests, parse_remaining_steps);

        let mut values = Vec::with_capacity(n);
        for (slot, outcome) in lookaheads.into_iter().enumerate() {
            match outcome {
                SlotOutcome::Parsed(v) => values.push(Some(v)),
                SlotOutcome::Unparseable(err) => {
                    warn!(slot = slot + 1, error = %err, "lookahead unparseable, imputing");
                    values.push(None);
                }
                SlotOutcome::Failed(source) => {
                    return Err(GatewayError::Backend {
                        purpose: RequestPurpose::PredictLookahead,
                        slot: slot + 1,
                        source,
                    })
                }
            }
        }
        let worst = values
            .iter()
            .flatten()
            .copied()
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(GatewayError::LookaheadExhausted)?;

        let members = actions
            .into_iter()
            .zip(values)
            .enumerate()
            .map(|(i, (action, value))| {
                let index = i + 1;
                let imputed = value.is_none();
                let steps = value.unwrap_or(worst + 1.0);
                Candidate {
                    index,
                    action,
                    prediction: Some(LookaheadPrediction {
                        candidate_index: index,
                        remaining_steps: steps,
                    }),
                    prediction_imputed: imputed,
                }
            })
            .collect();
        Ok(CandidateSet {
            stage,
            icl_iteration,
            members,
        })
    }

    /// Asks the backend whether the task is complete.
    pub fn check_completion(&self, context: &PromptContext, rng_seed: u64) -> Result<bool, GatewayError> {
        let descriptor = self.backend.descriptor();
        let request = CompletionRequest {
            purpose: RequestPurpose::CheckCompletion,
            prompt: render_prompt(context, PromptPurpose::CheckCompletion),
            temperature: descriptor.lookahead_temperature,
            max_tokens: descriptor.max_output_tokens,
            seed: rng_seed,
        };
        match self.run_slots(vec![request], parse_completion_answer).pop() {
            Some(SlotOutcome::Parsed(answer)) => Ok(answer),
            Some(SlotOutcome::Unparseable(e)) => Err(GatewayError::CompletionUnparseable(e)),
            Some(SlotOutcome::Failed(source)) => Err(GatewayError::Backend {
                purpose: RequestPurpose::CheckCompletion,
                slot: 1,
                source,
            }),
            None => unreachable!("one request yields one outcome"),
        }
    }

    /// Runs requests in concurrent rounds, retrying failed or unparseable
    /// slots up to the retry budget each.
    fn run_slots<T>(
        &self,
        requests: Vec<CompletionRequest>,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Vec<SlotOutcome<T>> {
        let budget = self.retry_budget();
        let mut outcomes: Vec<Option<SlotOutcome<T>>> = requests.iter().map(|_| None).collect();
        let mut transport_retries = vec![0u32; requests.len()];
        let mut parse_retries = vec![0u32; requests.len()];
        let mut pending: Vec<usize> = (0..requests.len()).collect();
        let mut round = 0u64;
        while !pending.is_empty() {
            let batch: Vec<CompletionRequest> = pending
                .iter()
                .map(|&slot| {
                    let mut r = requests[slot].clone();
                    if round > 0 {
                        r.seed = seed::derive(r.seed, &[round]);
                    }
                    r
                })
                .collect();
            let results = self.backend.complete_batch(&batch);
            let mut next = Vec::new();
            for (&slot, result) in pending.iter().zip(results) {
                match result {
                    Ok(text) => match parse(&text) {
                        Ok(value) => outcomes[slot] = Some(SlotOutcome::Parsed(value)),
                        Err(_) if parse_retries[slot] < budget => {
                            parse_retries[slot] += 1;
                            next.push(slot);
                        }
                        Err(err) => outcomes[slot] = Some(SlotOutcome::Unparseable(err)),
                    },
                    Err(err) if err.is_retryable() && transport_retries[slot] < budget => {
                        transport_retries[slot] += 1;
                        next.push(slot);
                    }
                    Err(err) => outcomes[slot] = Some(SlotOutcome::Failed(err)),
                }
            }
            pending = next;
            round += 1;
        }
        outcomes
            .into_iter()
            .map(|o| o.expect("every slot resolves"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptBuilder, ScriptedBackend};

    fn gateway(script: crate::backend::Script) -> (Gateway, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new(script, 0));
        (Gateway::new(backend.clone()), backend)
    }

    fn actions(names: &[&str]) -> Vec<Action> {
        names.iter().map(|n| Action::generated(*n, format!("because {n}"))).collect()
    }

    #[test]
    fn queued_actions_in_order() {
        let acts = actions(&["a", "b", "c"]);
        let (g, _) = gateway(ScriptBuilder::new().stage(&acts, &[3.0, 4.0, 5.0]).build());
        let set = g.generate_candidates(&PromptContext::default(), 3, 0, 0, 1).unwrap();
        assert_eq!(set.len(), 3);
        for (i, m) in set.members.iter().enumerate() {
            assert_eq!(m.index, i + 1);
            assert_eq!(m.action, acts[i]);
            assert_eq!(m.prediction.unwrap().remaining_steps, 3.0 + i as f64);
            assert!(!m.prediction_imputed);
        }
    }

    #[test]
    fn malformed_generation_is_retried_once() {
        let acts = actions(&["a", "b", "c"]);
        let script = ScriptBuilder::new()
            .action(&acts[0])
            .raw("no json here")
            .action(&acts[2])
            .action(&acts[1])
            .lookahead(1.0)
            .lookahead(1.0)
            .lookahead(1.0)
            .build();
        let (g, b) = gateway(script);
        let set = g.generate_candidates(&PromptContext::default(), 3, 0, 0, 1).unwrap();
        assert_eq!(set.members[1].action, acts[1]);
        assert_eq!(set.members[2].action, acts[2]);
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn persistent_malformed_generation_errors() {
        let acts = actions(&["a", "b", "c"]);
        let script = ScriptBuilder::new()
            .action(&acts[0])
            .raw("junk")
            .action(&acts[2])
            .raw("still junk")
            .build();
        let (g, _) = gateway(script);
        let err = g.generate_candidates(&PromptContext::default(), 3, 0, 0, 1).unwrap_err();
        assert!(matches!(err, GatewayError::GenerationExhausted { slot: 2, .. }));
        assert!(err.is_generation_exhausted());
    }

    #[test]
    fn fault_then_success_with_retry_budget_one() {
        let acts = actions(&["a", "b"]);
        let script = ScriptBuilder::new()
            .action(&acts[0])
            .fault("connection reset")
            .action(&acts[1])
            .lookahead(2.0)
            .lookahead(2.0)
            .build();
        let (g, b) = gateway(script);
        let set = g.generate_candidates(&PromptContext::default(), 2, 0, 0, 1).unwrap();
        assert_eq!(set.members[0].action, acts[0]);
        assert_eq!(set.members[1].action, acts[1]);
        let outcomes: Vec<String> = b.trace().into_iter().map(|t| t.outcome).collect();
        assert_eq!(outcomes[..3], ["completion", "fault", "completion"]);
    }

    #[test]
    fn repeated_faults_exhaust_retries() {
        let acts = actions(&["a", "b"]);
        let script = ScriptBuilder::new()
            .action(&acts[0])
            .fault("down")
            .fault("still down")
            .build();
        let (g, _) = gateway(script);
        let err = g.generate_candidates(&PromptContext::default(), 2, 0, 0, 1).unwrap_err();
        assert!(matches!(err, GatewayError::Backend { slot: 2, .. }));
    }

    #[test]
    fn unparseable_lookahead_gets_worst_plus_one() {
        let acts = actions(&["a", "b", "c"]);
        let script = ScriptBuilder::new()
            .action(&acts[0])
            .action(&acts[1])
            .action(&acts[2])
            .lookahead(4.0)
            .raw("dunno")
            .lookahead(6.0)
            .raw("still dunno")
            .build();
        let (g, _) = gateway(script);
        let set = g.generate_candidates(&PromptContext::default(), 3, 0, 0, 1).unwrap();
        let m = &set.members[1];
        assert!(m.prediction_imputed);
        assert_eq!(m.prediction.unwrap().remaining_steps, 7.0);
    }

    #[test]
    fn all_lookaheads_unparseable_is_an_error() {
        let acts = actions(&["a", "b"]);
        let script = ScriptBuilder::new()
            .action(&acts[0])
            .action(&acts[1])
            .raw("?")
            .raw("?")
            .raw("?")
            .raw("?")
            .build();
        let (g, _) = gateway(script);
        assert_eq!(
            g.generate_candidates(&PromptContext::default(), 2, 0, 0, 1).unwrap_err(),
            GatewayError::LookaheadExhausted
        );
    }

    #[test]
    fn missing_prediction_is_reported() {
        let set = CandidateSet {
            stage: 0,
            icl_iteration: 0,
            members: vec![Candidate {
                index: 1,
                action: Action::generated("a", ""),
                prediction: None,
                prediction_imputed: false,
            }],
        };
        assert_eq!(set.predictions().unwrap_err(), GatewayError::MissingPrediction { index: 1 });
    }
}
