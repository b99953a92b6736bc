use std::sync::Mutex;
use std::time::Duration;

use conplan_core::seed;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, BackendError, CompletionRequest, RequestPurpose};
use crate::action::Action;
use crate::harness::IncidentRecord;

/// One scripted backend reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Completion {
        completion: String,
        #[serde(default, skip_serializing_if = "is_zero")]
        delay_ms: u64,
    },
    Fault {
        fault: String,
    },
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl ScriptEntry {
    pub fn completion(text: impl Into<String>) -> Self {
        ScriptEntry::Completion {
            completion: text.into(),
            delay_ms: 0,
        }
    }

    pub fn fault(message: impl Into<String>) -> Self {
        ScriptEntry::Fault {
            fault: message.into(),
        }
    }
}

/// Ordered list of replies, consumed front to back.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("script entries serialize") + "\n")
            .collect()
    }

    pub fn from_json_lines(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    /// Script under which the planner reproduces the ground-truth plan of
    /// `record` with `n` unanimous candidates per stage.
    pub fn optimal_plan(record: &IncidentRecord, n: usize) -> Self {
        let actions = record.ground_truth.actions();
        let total = actions.len();
        let mut builder = ScriptBuilder::new();
        for (i, action) in actions.iter().enumerate() {
            let remaining = (total - i - 1) as f64;
            builder = builder.stage(&vec![action.clone(); n], &vec![remaining; n]);
        }
        builder.build()
    }
}

/// Convenience constructor for scripts.
#[derive(Debug, Clone, Default)]
pub struct ScriptBuilder {
    entries: Vec<ScriptEntry>,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A generation completion with a short reasoning block.
    pub fn action(mut self, action: &Action) -> Self {
        self.entries.push(ScriptEntry::completion(action_completion(action)));
        self
    }

    pub fn lookahead(mut self, remaining_steps: f64) -> Self {
        self.entries.push(ScriptEntry::completion(lookahead_completion(remaining_steps)));
        self
    }

    pub fn completion_answer(mut self, completed: bool) -> Self {
        self.entries.push(ScriptEntry::completion(format!(
            "</think>\n{{\"Completed\": {completed}}}"
        )));
        self
    }

    pub fn raw(mut self, text: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry::completion(text));
        self
    }

    pub fn delayed(mut self, text: impl Into<String>, delay_ms: u64) -> Self {
        self.entries.push(ScriptEntry::Completion {
            completion: text.into(),
            delay_ms,
        });
        self
    }

    pub fn fault(mut self, message: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry::fault(message));
        self
    }

    /// `actions.len()` generation replies followed by one lookahead reply per action.
    pub fn stage(mut self, actions: &[Action], predictions: &[f64]) -> Self {
        assert_eq!(actions.len(), predictions.len(), "one prediction per action");
        for a in actions {
            self = self.action(a);
        }
        for &p in predictions {
            self = self.lookahead(p);
        }
        self
    }

    pub fn extend(mut self, script: Script) -> Self {
        self.entries.extend(script.entries);
        self
    }

    pub fn build(self) -> Script {
        Script {
            entries: self.entries,
        }
    }
}

pub fn action_completion(action: &Action) -> String {
    let payload = serde_json::json!({
        "Action": action.action_text,
        "Explanation": action.explanation,
    });
    format!("Considering the current state and the logs.</think>\n{payload}")
}

pub fn lookahead_completion(remaining_steps: f64) -> String {
    let payload = if remaining_steps.fract() == 0.0 && remaining_steps.abs() < 1e15 {
        serde_json::json!({ "RemainingSteps": remaining_steps as i64 })
    } else {
        serde_json::json!({ "RemainingSteps": remaining_steps })
    };
    format!("</think>\n{payload}")
}

/// What the scripted backend did for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub position: u64,
    pub purpose: RequestPurpose,
    pub request_seed: u64,
    pub delay_ms: u64,
    pub outcome: String,
}

#[derive(Debug, Default)]
struct ReplayState {
    cursor: u64,
    trace: Vec<TraceEntry>,
}

/// Replays a [`Script`]. Batches reserve entries in request order before any
/// delay is applied, so results do not depend on thread scheduling.
#[derive(Debug)]
pub struct ScriptedBackend {
    descriptor: BackendDescriptor,
    script: Script,
    seed: u64,
    jitter_ms: u64,
    state: Mutex<ReplayState>,
}

impl ScriptedBackend {
    pub fn new(script: Script, seed: u64) -> Self {
        Self {
            descriptor: BackendDescriptor::scripted(),
            script,
            seed,
            jitter_ms: 0,
            state: Mutex::new(ReplayState::default()),
        }
    }

    pub fn with_descriptor(mut self, descriptor: BackendDescriptor) -> Self {
        self.descriptor = descriptor;
        self
    }

    /// Adds a seed-derived delay of up to `jitter_ms` to every reply.
    pub fn with_jitter(mut self, jitter_ms: u64) -> Self {
        self.jitter_ms = jitter_ms;
        self
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.state.lock().expect("scripted backend lock").trace.clone()
    }

    pub fn remaining(&self) -> usize {
        let cursor = self.state.lock().expect("scripted backend lock").cursor as usize;
        self.script.len().saturating_sub(cursor)
    }

    fn reserve(&self, state: &mut ReplayState, request: &CompletionRequest) -> (u64, Result<String, BackendError>) {
        let position = state.cursor;
        let (delay_ms, result) = match self.script.entries.get(position as usize) {
            Some(ScriptEntry::Completion { completion, delay_ms }) => {
                (*delay_ms + self.jitter(position), Ok(completion.clone()))
            }
            Some(ScriptEntry::Fault { fault }) => {
                (self.jitter(position), Err(BackendError::InjectedFault(fault.clone())))
            }
            None => (0, Err(BackendError::ScriptExhausted { consumed: position })),
        };
        if !matches!(result, Err(BackendError::ScriptExhausted { .. })) {
            state.cursor += 1;
        }
        state.trace.push(TraceEntry {
            position,
            purpose: request.purpose,
            request_seed: request.seed,
            delay_ms,
            outcome: match &result {
                Ok(_) => "completion".into(),
                Err(BackendError::ScriptExhausted { .. }) => "exhausted".into(),
                Err(_) => "fault".into(),
            },
        });
        (delay_ms, result)
    }

    fn jitter(&self, position: u64) -> u64 {
        if self.jitter_ms == 0 {
            0
        } else {
            seed::derive(self.seed, &[position]) % (self.jitter_ms + 1)
        }
    }
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let (delay, result) = {
            let mut state = self.state.lock().expect("scripted backend lock");
            self.reserve(&mut state, request)
        };
        if delay > 0 {
            std::thread::sleep(Duration::from_millis(delay));
        }
        result
    }

    fn complete_batch(&self, requests: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        let reserved: Vec<(u64, Result<String, BackendError>)> = {
            let mut state = self.state.lock().expect("scripted backend lock");
            requests.iter().map(|r| self.reserve(&mut state, r)).collect()
        };
        if reserved.iter().all(|(d, _)| *d == 0) {
            return reserved.into_iter().map(|(_, r)| r).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = reserved
                .into_iter()
                .map(|(delay, result)| {
                    scope.spawn(move || {
                        std::thread::sleep(Duration::from_millis(delay));
                        result
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("delay thread"))
                .collect()
        })
    }

    fn cursor(&self) -> Option<u64> {
        Some(self.state.lock().expect("scripted backend lock").cursor)
    }

    fn seek(&self, position: u64) -> Result<(), BackendError> {
        if position as usize > self.script.len() {
            return Err(BackendError::ScriptExhausted {
                consumed: self.script.len() as u64,
            });
        }
        self.state.lock().expect("scripted backend lock").cursor = position;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(seed: u64) -> CompletionRequest {
        CompletionRequest {
            purpose: RequestPurpose::GenerateAction,
            prompt: "p".into(),
            temperature: 0.7,
            max_tokens: 10,
            seed,
        }
    }

    #[test]
    fn single_completion() {
        let b = ScriptedBackend::new(ScriptBuilder::new().raw("hello").build(), 0);
        assert_eq!(b.complete(&req(1)).unwrap(), "hello");
        assert_eq!(b.complete(&req(2)), Err(BackendError::ScriptExhausted { consumed: 1 }));
    }

    #[test]
    fn faults_surface_as_errors() {
        let b = ScriptedBackend::new(ScriptBuilder::new().raw("a").fault("boom").raw("b").build(), 0);
        assert_eq!(b.complete(&req(0)).unwrap(), "a");
        assert!(matches!(b.complete(&req(0)), Err(BackendError::InjectedFault(_))));
        assert_eq!(b.complete(&req(0)).unwrap(), "b");
    }

    #[test]
    fn batch_results_follow_request_order_despite_delays() {
        let script = ScriptBuilder::new()
            .delayed("first", 60)
            .delayed("second", 30)
            .delayed("third", 0)
            .build();
        let b = ScriptedBackend::new(script, 0);
        let out = b.complete_batch(&[req(0), req(1), req(2)]);
        let texts: Vec<String> = out.into_iter().map(Result::unwrap).collect();
        assert_eq!(texts, vec!["first", "second", "third"]);
    }

    #[test]
    fn identical_runs_give_identical_traces() {
        let script = ScriptBuilder::new().raw("a").fault("x").raw("b").build();
        let run = || {
            let b = ScriptedBackend::new(script.clone(), 42).with_jitter(3);
            let _ = b.complete_batch(&[req(1), req(2)]);
            let _ = b.complete(&req(3));
            serde_json::to_string(&b.trace()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn json_lines_round_trip() {
        let script = ScriptBuilder::new()
            .action(&Action::generated("Block", "why"))
            .lookahead(3.0)
            .fault("net")
            .delayed("x", 5)
            .build();
        let text = script.to_json_lines();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(Script::from_json_lines(&text).unwrap(), script);
    }

    #[test]
    fn seek_moves_cursor() {
        let b = ScriptedBackend::new(ScriptBuilder::new().raw("a").raw("b").build(), 0);
        b.seek(1).unwrap();
        assert_eq!(b.complete(&req(0)).unwrap(), "b");
        assert!(b.seek(3).is_err());
    }
}
