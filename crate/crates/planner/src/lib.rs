//! Consistency-gated planning over an LLM backend.
//!
//! * [`gateway`] turns prompts into candidate sets with lookahead predictions.
//! * [`planner`] runs the stage loop on an event-sourced [`session`].
//! * [`harness`] loads incident corpora and scores plans against ground truth.

pub mod action;
pub mod backend;
pub mod events;
pub mod feedback;
pub mod gateway;
pub mod harness;
pub mod parse;
pub mod planner;
pub mod prompt;
pub mod regret;
pub mod replay;
pub mod session;

pub use action::{Action, ActionOrigin, Criterion, RecoveryState};
pub use backend::{Backend, BackendDescriptor, BackendError, BackendKind};
pub use events::{EventBody, EventLog, FileSink, SessionEvent};
pub use feedback::{FeedbackProvider, FeedbackRecord, ProviderKind};
pub use gateway::{Candidate, CandidateSet, Gateway, GatewayError};
pub use harness::{load_corpus, score_plan, GroundTruthPlan, IncidentRecord, PlanScore, Verdict};
pub use planner::{NewSession, PlanError, Planner, SessionRun, StageOutcome, StepOutcome};
pub use prompt::PromptContext;
pub use replay::replay;
pub use session::{Limits, PlanMode, PlanSession, PlannerSettings, SessionStatus};
