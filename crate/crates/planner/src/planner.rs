//! The stage loop with consistency-gated selection and feedback refinement.
//!
//! Every step reads the folded session, performs one unit of work and
//! records it as an event, so a session restored from a truncated log
//! continues exactly where the log ends.

use conplan_core::{consistency, decide_with_score, seed, DomainError, Params, Score};
use thiserror::Error;
use tracing::{debug, info};

use crate::action::Action;
use crate::backend::RequestPurpose;
use crate::events::{EventBody, EventLog, EventSink, SessionEvent};
use crate::feedback::{FeedbackError, FeedbackOutcome, FeedbackProvider, FeedbackRecord, FeedbackRequest};
use crate::gateway::{CandidateSet, Gateway, GatewayError};
use crate::harness::{judge_action, GroundTruthPlan, IncidentRecord};
use crate::prompt::PromptContext;
use crate::session::{FoldError, PlanMode, PlanSession, PlannerSettings, SessionStatus, SettingsError};

const TAG_GENERATE: u64 = 1;
const TAG_TIE_BREAK: u64 = 2;
const TAG_COMPLETION: u64 = 3;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error("stale feedback for ({got_stage}, {got_iteration}); session expects {expected}")]
    Stale {
        expected: String,
        got_stage: usize,
        got_iteration: usize,
    },
    #[error("operation not allowed while session is {0}")]
    InvalidStatus(SessionStatus),
    #[error("event log write failed: {0}")]
    Io(#[from] std::io::Error),
}

impl PlanError {
    pub fn is_stale(&self) -> bool {
        matches!(self, PlanError::Stale { .. })
    }
}

/// Inputs for a new session.
#[derive(Debug, Clone, PartialEq)]
pub struct NewSession {
    pub session_id: String,
    pub incident_id: Option<String>,
    pub context: PromptContext,
    pub ground_truth: Option<GroundTruthPlan>,
    pub settings: PlannerSettings,
    pub seed: u64,
}

impl NewSession {
    pub fn from_incident(
        session_id: impl Into<String>,
        record: &IncidentRecord,
        settings: PlannerSettings,
        seed: u64,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            incident_id: Some(record.incident_id.clone()),
            context: PromptContext::from_incident(record),
            ground_truth: Some(record.ground_truth.clone()),
            settings,
            seed,
        }
    }

    fn into_event(self) -> EventBody {
        EventBody::SessionCreated {
            session_id: self.session_id,
            incident_id: self.incident_id,
            context: self.context,
            ground_truth: self.ground_truth,
            settings: self.settings,
            seed: self.seed,
        }
    }
}

/// A session together with its event log. All mutations go through events.
#[derive(Debug)]
pub struct SessionRun {
    session: PlanSession,
    log: EventLog,
}

impl SessionRun {
    pub fn create(new: NewSession, mut log: EventLog) -> Result<Self, PlanError> {
        new.settings.validate()?;
        if log.next_seq() != 0 {
            return Err(FoldError::Inconsistent {
                seq: log.next_seq(),
                reason: "cannot create a session on a non-empty log".into(),
            }
            .into());
        }
        let event = log.append(new.into_event())?.clone();
        let session = PlanSession::from_created(&event)?;
        Ok(Self { session, log })
    }

    /// Rebuilds a session from persisted events; new events go to `sink`.
    pub fn restore(events: Vec<SessionEvent>, sink: Option<Box<dyn EventSink>>) -> Result<Self, PlanError> {
        let session = PlanSession::fold(&events)?;
        session.settings.validate()?;
        Ok(Self {
            session,
            log: EventLog::restore(events, sink),
        })
    }

    pub fn session(&self) -> &PlanSession {
        &self.session
    }

    pub fn events(&self) -> &[SessionEvent] {
        self.log.events()
    }

    pub fn event_log_json_lines(&self) -> String {
        self.log.to_json_lines()
    }

    fn emit(&mut self, body: EventBody) -> Result<(), PlanError> {
        let event = self.log.append(body)?;
        debug!(seq = event.seq, kind = event.body.type_name(), "session event");
        let event = event.clone();
        self.session.apply(&event)?;
        Ok(())
    }

    fn set_status(&mut self, to: SessionStatus, reason: impl Into<String>) -> Result<(), PlanError> {
        let from = self.session.status;
        if from == to {
            return Ok(());
        }
        let reason = reason.into();
        info!(session = %self.session.session_id, %from, %to, %reason, "status change");
        self.emit(EventBody::StatusChanged { from, to, reason })
    }

    /// Incorporates a verdict for the pending abstention.
    pub fn apply_feedback(&mut self, record: FeedbackRecord) -> Result<(), PlanError> {
        let status = self.session.status;
        if !matches!(status, SessionStatus::Running | SessionStatus::AwaitingFeedback) {
            return Err(PlanError::InvalidStatus(status));
        }
        let pending = self.session.pending_feedback.as_ref();
        let matches = pending.is_some_and(|p| p.stage == record.stage && p.icl_iteration == record.icl_iteration);
        if !matches {
            return Err(PlanError::Stale {
                expected: pending.map_or_else(
                    || "no feedback".to_string(),
                    |p| format!("feedback for ({}, {})", p.stage, p.icl_iteration),
                ),
                got_stage: record.stage,
                got_iteration: record.icl_iteration,
            });
        }
        record.validate()?;
        self.emit(EventBody::FeedbackApplied { record })?;
        if status == SessionStatus::AwaitingFeedback {
            self.set_status(SessionStatus::Running, "feedback received")?;
        }
        Ok(())
    }

    /// Grants a fresh refinement budget to an interrupted session.
    pub fn resume(&mut self) -> Result<(), PlanError> {
        match self.session.status {
            SessionStatus::Interrupted => {
                self.set_status(SessionStatus::Running, "resumed by operator")?;
                let k = self.session.icl_iteration;
                self.emit(EventBody::Resumed { icl_iteration: k })
            }
            SessionStatus::Running | SessionStatus::AwaitingFeedback => Ok(()),
            status => Err(PlanError::InvalidStatus(status)),
        }
    }

    /// The feedback request for the pending abstention, if any.
    pub fn pending_request(&self) -> Option<FeedbackRequest> {
        self.session.pending_feedback.as_ref().map(|p| FeedbackRequest {
            stage: p.stage,
            icl_iteration: p.icl_iteration,
            action: p.action.clone(),
            candidate_index: p.candidate_index,
            state: self.session.state,
        })
    }
}

/// Result of one stage of the loop.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Selected(Action),
    AwaitingFeedback,
    Interrupted,
}

/// Result of one outer-loop step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Selected(Action),
    AwaitingFeedback,
    Interrupted,
    Completed,
    Failed,
    /// The session was not running; nothing happened.
    Idle(SessionStatus),
}

impl From<StageOutcome> for StepOutcome {
    fn from(o: StageOutcome) -> Self {
        match o {
            StageOutcome::Selected(a) => StepOutcome::Selected(a),
            StageOutcome::AwaitingFeedback => StepOutcome::AwaitingFeedback,
            StageOutcome::Interrupted => StepOutcome::Interrupted,
        }
    }
}

/// Drives sessions with a gateway and a feedback provider.
pub struct Planner<'a> {
    gateway: &'a Gateway,
    provider: &'a mut dyn FeedbackProvider,
}

impl<'a> Planner<'a> {
    pub fn new(gateway: &'a Gateway, provider: &'a mut dyn FeedbackProvider) -> Self {
        Self { gateway, provider }
    }

    /// Moves a seekable backend to the position recorded in the session.
    pub fn sync_backend(&self, run: &SessionRun) -> Result<(), PlanError> {
        if let Some(pos) = run.session.backend_cursor {
            self.gateway
                .backend()
                .seek(pos)
                .map_err(|source| GatewayError::Backend {
                    purpose: RequestPurpose::GenerateAction,
                    slot: 0,
                    source,
                })?;
        }
        Ok(())
    }

    /// Runs until the session completes, fails, is interrupted or parks
    /// awaiting feedback. Returns the accepted actions.
    pub fn run_plan(&mut self, run: &mut SessionRun) -> Result<Vec<Action>, PlanError> {
        loop {
            match self.step(run)? {
                StepOutcome::Selected(_) => continue,
                _ => return Ok(run.session.accepted_actions.clone()),
            }
        }
    }

    /// One iteration of the outer loop: completion guard, stage cap, then
    /// one stage.
    pub fn step(&mut self, run: &mut SessionRun) -> Result<StepOutcome, PlanError> {
        let status = run.session.status;
        if status != SessionStatus::Running {
            return Ok(StepOutcome::Idle(status));
        }
        let stage_started = run.session.entry_at_cursor().is_some() || run.session.icl_iteration > 0;
        if !stage_started {
            let t = run.session.stage;
            let checked = run.session.last_completion.filter(|c| c.stage == t);
            let complete = match checked {
                Some(c) => c.complete,
                None => self.check_completion(run)?,
            };
            if complete {
                run.set_status(SessionStatus::Completed, "completion predicate holds")?;
                return Ok(StepOutcome::Completed);
            }
            if t >= run.session.settings.limits.max_stages {
                run.set_status(
                    SessionStatus::Failed,
                    format!("stage cap of {} reached", run.session.settings.limits.max_stages),
                )?;
                return Ok(StepOutcome::Failed);
            }
        }
        Ok(self.run_stage(run)?.into())
    }

    /// Evaluates the completion guard and records it.
    ///
    /// In harness mode the recovery state decides. In live mode the backend
    /// is asked as well; with ground truth both must agree, without it the
    /// backend alone decides. Backend errors count as not complete.
    pub fn check_completion(&self, run: &mut SessionRun) -> Result<bool, PlanError> {
        let session = &run.session;
        let state_complete = session.state.is_recovered();
        let (ground_truth, backend, backend_error, complete, disagreement) = match session.settings.mode {
            PlanMode::Harness => (Some(state_complete), None, None, state_complete, false),
            PlanMode::Live => {
                let seed = seed::derive(session.rng_seed, &[TAG_COMPLETION, session.stage as u64]);
                let (backend, error) = match self.gateway.check_completion(&session.prompt_context, seed) {
                    Ok(answer) => (Some(answer), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                let answer = backend.unwrap_or(false);
                if session.ground_truth.is_some() {
                    let disagreement = backend.is_some_and(|b| b != state_complete);
                    (Some(state_complete), backend, error, state_complete && answer, disagreement)
                } else {
                    (None, backend, error, answer, false)
                }
            }
        };
        let backend_cursor = self.gateway.backend().cursor();
        let stage = session.stage;
        run.emit(EventBody::CompletionChecked {
            stage,
            ground_truth,
            backend,
            backend_error,
            complete,
            disagreement,
            backend_cursor,
        })?;
        Ok(complete)
    }

    /// Runs the inner refinement loop of the current stage until an action
    /// is selected, feedback is pending or the refinement budget runs out.
    pub fn run_stage(&mut self, run: &mut SessionRun) -> Result<StageOutcome, PlanError> {
        loop {
            let status = run.session.status;
            if status != SessionStatus::Running {
                return match status {
                    SessionStatus::AwaitingFeedback => Ok(StageOutcome::AwaitingFeedback),
                    SessionStatus::Interrupted => Ok(StageOutcome::Interrupted),
                    other => Err(PlanError::InvalidStatus(other)),
                };
            }
            let Some(entry) = run.session.entry_at_cursor().cloned() else {
                if run.session.icl_budget_exhausted() {
                    let k = run.session.icl_iteration;
                    run.set_status(
                        SessionStatus::Interrupted,
                        format!("refinement budget exhausted after {k} feedback rounds"),
                    )?;
                    return Ok(StageOutcome::Interrupted);
                }
                self.generate(run)?;
                continue;
            };
            let Some(score) = entry.score else {
                score_candidates(run, &entry.candidates)?;
                continue;
            };
            let Some(decision) = entry.decision else {
                let predictions = entry.candidates.predictions()?;
                let s = &run.session;
                let tie_seed = seed::derive(s.rng_seed, &[TAG_TIE_BREAK, s.stage as u64, s.icl_iteration as u64]);
                let decision = decide_with_score(&predictions, score, &s.settings.threshold, tie_seed)?;
                let (stage, icl_iteration) = (s.stage, s.icl_iteration);
                run.emit(EventBody::Decided {
                    stage,
                    icl_iteration,
                    decision,
                })?;
                continue;
            };
            match decision.selected_index {
                Some(index) => {
                    let action = member_action(&entry.candidates, index)?;
                    accept(run, index, action.clone())?;
                    return Ok(StageOutcome::Selected(action));
                }
                None => {
                    if run.session.pending_feedback.is_none() {
                        let index = decision.argmin_index;
                        let action = member_action(&entry.candidates, index)?;
                        let (stage, icl_iteration) = (run.session.stage, run.session.icl_iteration);
                        run.emit(EventBody::FeedbackRequested {
                            stage,
                            icl_iteration,
                            candidate_index: index,
                            action,
                        })?;
                    }
                    let request = run.pending_request().expect("feedback was just requested");
                    match self.provider.evaluate(&request) {
                        FeedbackOutcome::Ready(draft) => run.apply_feedback(draft.into_record(&request))?,
                        FeedbackOutcome::Unavailable => {
                            run.set_status(SessionStatus::AwaitingFeedback, "feedback provider has no answer yet")?;
                            return Ok(StageOutcome::AwaitingFeedback);
                        }
                    }
                }
            }
        }
    }

    /// Generates the candidate set at the cursor, retrying once with a
    /// fresh seed when generation is exhausted.
    fn generate(&self, run: &mut SessionRun) -> Result<(), PlanError> {
        loop {
            let s = &run.session;
            let (stage, icl_iteration) = (s.stage, s.icl_iteration);
            let attempt = s.failed_attempts;
            let gen_seed = seed::derive(
                s.rng_seed,
                &[TAG_GENERATE, stage as u64, icl_iteration as u64, attempt as u64],
            );
            let result = self.gateway.generate_candidates(
                &s.prompt_context,
                s.settings.n_candidates,
                stage,
                icl_iteration,
                gen_seed,
            );
            let backend_cursor = self.gateway.backend().cursor();
            match result {
                Ok(candidates) => {
                    return run.emit(EventBody::CandidatesGenerated {
                        candidates,
                        attempt,
                        backend_cursor,
                    });
                }
                Err(error) => {
                    run.emit(EventBody::GenerationFailed {
                        stage,
                        icl_iteration,
                        attempt,
                        error: error.to_string(),
                        backend_cursor,
                    })?;
                    // Attempts come in pairs: the first exhausted attempt of
                    // a pair is retried, the second is reported.
                    if error.is_generation_exhausted() && attempt.is_multiple_of(2) {
                        continue;
                    }
                    return Err(error.into());
                }
            }
        }
    }
}

fn member_action(candidates: &CandidateSet, index: usize) -> Result<Action, PlanError> {
    candidates
        .member(index)
        .map(|m| m.action.clone())
        .ok_or_else(|| GatewayError::MissingPrediction { index }.into())
}

/// Scores a candidate set, honouring hard constraints.
fn score_candidates(run: &mut SessionRun, candidates: &CandidateSet) -> Result<(), PlanError> {
    let s = &run.session;
    let violation = s
        .settings
        .constraints
        .iter()
        .find_map(|c| candidates.members.iter().find_map(|m| c.violation(&m.action)));
    let score: Score = match &violation {
        Some(_) => Score::zero(candidates.len()),
        None => consistency(&candidates.predictions()?, &Params::new(s.settings.beta)?)?,
    };
    let (stage, icl_iteration) = (s.stage, s.icl_iteration);
    run.emit(EventBody::ConsistencyEvaluated {
        stage,
        icl_iteration,
        score,
        constraint_violation: violation,
    })
}

/// Commits the selected action, judging it against ground truth when the
/// session has one.
fn accept(run: &mut SessionRun, candidate_index: usize, action: Action) -> Result<(), PlanError> {
    let s = &run.session;
    let (verdict, state_after) = match &s.ground_truth {
        Some(plan) => {
            let j = judge_action(&action, plan, &s.state);
            (Some(j.verdict), j.new_state)
        }
        None => (None, s.state),
    };
    let stage = s.stage;
    run.emit(EventBody::ActionAccepted {
        stage,
        candidate_index,
        action,
        verdict,
        state_after,
    })
}
