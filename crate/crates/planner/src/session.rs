//! Planning session state, rebuilt by folding the event log.

use std::fmt;

use conplan_core::{Decision, Gamma, Score};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, RecoveryState};
use crate::events::{EventBody, SessionEvent};
use crate::feedback::FeedbackRecord;
use crate::gateway::CandidateSet;
use crate::harness::{GroundTruthPlan, DEFAULT_STAGE_CAP};
use crate::prompt::PromptContext;

pub const DEFAULT_MAX_ICL_ITERATIONS: usize = 10;
pub const DEFAULT_N_CANDIDATES: usize = 3;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingFeedback,
    Completed,
    Failed,
    Interrupted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Completed | SessionStatus::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Running => "running",
            SessionStatus::AwaitingFeedback => "awaiting_feedback",
            SessionStatus::Completed => "completed",
            SessionStatus::Failed => "failed",
            SessionStatus::Interrupted => "interrupted",
        }
    }

    /// Allowed transitions of the session state machine.
    pub fn can_transition_to(self, to: SessionStatus) -> bool {
        use SessionStatus::*;
        match self {
            Running => matches!(to, AwaitingFeedback | Completed | Failed | Interrupted),
            AwaitingFeedback => matches!(to, Running | Interrupted),
            Interrupted => matches!(to, Running),
            Completed | Failed => false,
        }
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How completion is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Completion from the recovery state alone.
    #[default]
    Harness,
    /// Completion additionally asked of the backend.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_icl_iterations: usize,
    pub max_stages: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_icl_iterations: DEFAULT_MAX_ICL_ITERATIONS,
            max_stages: DEFAULT_STAGE_CAP,
        }
    }
}

/// Hard predicate over candidate actions; a violation forces λ = 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// No candidate may contain the phrase (case-insensitive).
    ForbidPhrase { phrase: String },
}

impl Constraint {
    /// A description of the violation, if `action` violates the constraint.
    pub fn violation(&self, action: &Action) -> Option<String> {
        match self {
            Constraint::ForbidPhrase { phrase } => {
                let needle = phrase.to_lowercase();
                (!needle.is_empty() && action.action_text.to_lowercase().contains(&needle))
                    .then(|| format!("action \"{}\" contains forbidden phrase \"{phrase}\"", action.action_text))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSettings {
    pub n_candidates: usize,
    pub beta: f64,
    pub threshold: Gamma,
    #[serde(default)]
    pub mode: PlanMode,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            n_candidates: DEFAULT_N_CANDIDATES,
            beta: DEFAULT_BETA,
            threshold: Gamma::Finite(DEFAULT_GAMMA),
            mode: PlanMode::Harness,
            limits: Limits::default(),
            constraints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SettingsError {
    #[error("n_candidates must be at least 2, got {0}")]
    TooFewCandidates(usize),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("threshold must be finite, got {0}")]
    InvalidThreshold(f64),
    #[error("{0} must be at least 1")]
    ZeroLimit(&'static str),
}

impl PlannerSettings {
    pub fn validate(&self) -> Result<(), SettingsError> {
        if self.n_candidates < 2 {
            return Err(SettingsError::TooFewCandidates(self.n_candidates));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(SettingsError::InvalidBeta(self.beta));
        }
        if let Gamma::Finite(g) = self.threshold {
            if !g.is_finite() {
                return Err(SettingsError::InvalidThreshold(g));
            }
        }
        if self.limits.max_icl_iterations == 0 {
            return Err(SettingsError::ZeroLimit("max_icl_iterations"));
        }
        if self.limits.max_stages == 0 {
            return Err(SettingsError::ZeroLimit("max_stages"));
        }
        Ok(())
    }
}

/// One generated set with the decision taken on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub candidates: CandidateSet,
    pub score: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_violation: Option<String>,
    pub decision: Option<Decision>,
    pub feedback: Option<FeedbackRecord>,
}

/// The abstention awaiting a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingFeedback {
    pub stage: usize,
    pub icl_iteration: usize,
    pub candidate_index: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FoldError {
    #[error("event log is empty")]
    Empty,
    #[error("first event must be session_created, found {0}")]
    MissingCreation(&'static str),
    #[error("event {seq}: {reason}")]
    Inconsistent { seq: u64, reason: String },
}

/// Session state derived from events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSession {
    pub session_id: String,
    pub incident_id: Option<String>,
    pub prompt_context: PromptContext,
    pub ground_truth: Option<GroundTruthPlan>,
    pub settings: PlannerSettings,
    pub rng_seed: u64,
    pub state: RecoveryState,
    pub stage: usize,
    pub icl_iteration: usize,
    /// Iteration at which the current refinement budget started; moved
    /// forward when an interrupted session is resumed.
    pub icl_budget_start: usize,
    pub history: Vec<HistoryEntry>,
    pub accepted_actions: Vec<Action>,
    pub status: SessionStatus,
    pub pending_feedback: Option<PendingFeedback>,
    pub backend_cursor: Option<u64>,
    pub completion_disagreements: usize,
    pub last_completion: Option<CompletionCheck>,
    /// Generation failures since the last successful generation.
    pub failed_attempts: u32,
    pub last_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionCheck {
    pub stage: usize,
    pub complete: bool,
}

impl PlanSession {
    /// Builds the initial state from a `session_created` event.
    pub fn from_created(event: &SessionEvent) -> Result<Self, FoldError> {
        let EventBody::SessionCreated {
            session_id,
            incident_id,
            context,
            ground_truth,
            settings,
            seed,
        } = &event.body
        else {
            return Err(FoldError::MissingCreation(event.body.type_name()));
        };
        Ok(Self {
            session_id: session_id.clone(),
            incident_id: incident_id.clone(),
            prompt_context: context.clone(),
            ground_truth: ground_truth.clone(),
            settings: settings.clone(),
            rng_seed: *seed,
            state: context.recovery_state,
            stage: 0,
            icl_iteration: 0,
            icl_budget_start: 0,
            history: Vec::new(),
            accepted_actions: Vec::new(),
            status: SessionStatus::Running,
            pending_feedback: None,
            backend_cursor: None,
            completion_disagreements: 0,
            last_completion: None,
            failed_attempts: 0,
            last_seq: event.seq,
        })
    }

    pub fn fold(events: &[SessionEvent]) -> Result<Self, FoldError> {
        let (first, rest) = events.split_first().ok_or(FoldError::Empty)?;
        let mut session = Self::from_created(first)?;
        for event in rest {
            session.apply(event)?;
        }
        Ok(session)
    }

    /// Applies one event after the creation event.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), FoldError> {
        let bad = |reason: String| FoldError::Inconsistent {
            seq: event.seq,
            reason,
        };
        if event.seq != self.last_seq + 1 {
            return Err(bad(format!("expected sequence number {}", self.last_seq + 1)));
        }
        match &event.body {
            EventBody::SessionCreated { .. } => {
                return Err(bad("duplicate session_created".into()));
            }
            EventBody::CandidatesGenerated {
                candidates,
                backend_cursor,
                ..
            } => {
                if (candidates.stage, candidates.icl_iteration) != (self.stage, self.icl_iteration) {
                    return Err(bad(format!(
                        "candidates for ({}, {}) at cursor ({}, {})",
                        candidates.stage, candidates.icl_iteration, self.stage, self.icl_iteration
                    )));
                }
                self.history.push(HistoryEntry {
                    candidates: candidates.clone(),
                    score: None,
                    constraint_violation: None,
                    decision: None,
                    feedback: None,
                });
                if backend_cursor.is_some() {
                    self.backend_cursor = *backend_cursor;
                }
                self.failed_attempts = 0;
            }
            EventBody::GenerationFailed { backend_cursor, .. } => {
                self.failed_attempts += 1;
                if backend_cursor.is_some() {
                    self.backend_cursor = *backend_cursor;
                }
            }
            EventBody::ConsistencyEvaluated {
                score,
                constraint_violation,
                ..
            } => {
                let entry = self.open_entry().ok_or_else(|| bad("no candidate set to score".into()))?;
                entry.score = Some(*score);
                entry.constraint_violation = constraint_violation.clone();
            }
            EventBody::Decided { decision, .. } => {
                let entry = self.open_entry().ok_or_else(|| bad("no candidate set to decide".into()))?;
                entry.decision = Some(*decision);
            }
            EventBody::ActionAccepted {
                action, state_after, ..
            } => {
                self.accepted_actions.push(action.clone());
                self.prompt_context.previous_actions.push(action.clone());
                self.state = *state_after;
                self.prompt_context.recovery_state = *state_after;
                self.stage += 1;
                self.icl_iteration = 0;
                self.icl_budget_start = 0;
            }
            EventBody::FeedbackRequested {
                stage,
                icl_iteration,
                candidate_index,
                action,
            } => {
                self.pending_feedback = Some(PendingFeedback {
                    stage: *stage,
                    icl_iteration: *icl_iteration,
                    candidate_index: *candidate_index,
                    action: action.clone(),
                });
            }
            EventBody::FeedbackApplied { record } => {
                if let Some(entry) = self.history.last_mut() {
                    if entry.candidates.stage == record.stage && entry.candidates.icl_iteration == record.icl_iteration {
                        entry.feedback = Some(record.clone());
                    }
                }
                self.prompt_context.feedback_notes.push(record.context_note());
                self.pending_feedback = None;
                self.icl_iteration += 1;
            }
            EventBody::CompletionChecked {
                stage,
                complete,
                disagreement,
                backend_cursor,
                ..
            } => {
                if *disagreement {
                    self.completion_disagreements += 1;
                }
                self.last_completion = Some(CompletionCheck {
                    stage: *stage,
                    complete: *complete,
                });
                if backend_cursor.is_some() {
                    self.backend_cursor = *backend_cursor;
                }
            }
            EventBody::StatusChanged { from, to, .. } => {
                if *from != self.status {
                    return Err(bad(format!("status change from {from} while {}", self.status)));
                }
                if !from.can_transition_to(*to) {
                    return Err(bad(format!("illegal transition {from} -> {to}")));
                }
                self.status = *to;
            }
            EventBody::Resumed { icl_iteration } => {
                self.icl_budget_start = *icl_iteration;
            }
        }
        self.last_seq = event.seq;
        Ok(())
    }

    fn open_entry(&mut self) -> Option<&mut HistoryEntry> {
        let (t, k) = (self.stage, self.icl_iteration);
        self.history
            .last_mut()
            .filter(|e| e.candidates.stage == t && e.candidates.icl_iteration == k && e.decision.is_none())
    }

    /// The most recent candidate set with its decision, if any.
    pub fn current(&self) -> Option<&HistoryEntry> {
        self.history.last()
    }

    /// The history entry at the current (stage, iteration) cursor.
    pub fn entry_at_cursor(&self) -> Option<&HistoryEntry> {
        self.history
            .last()
            .filter(|e| e.candidates.stage == self.stage && e.candidates.icl_iteration == self.icl_iteration)
    }

    /// Number of select decisions in the history.
    pub fn selections(&self) -> usize {
        self.history
            .iter()
            .filter(|h| h.decision.is_some_and(|d| !d.is_abstain()))
            .count()
    }

    pub fn feedback_records(&self) -> impl Iterator<Item = &FeedbackRecord> {
        self.history.iter().filter_map(|h| h.feedback.as_ref())
    }

    pub fn icl_budget_exhausted(&self) -> bool {
        self.icl_iteration - self.icl_budget_start >= self.settings.limits.max_icl_iterations
    }
}
