//! Re-execution of a session from its event log.
//!
//! The only inputs a session receives from outside the loop are feedback
//! verdicts and operator resumes. Replay re-creates the session from its
//! `session_created` event, serves recorded verdicts in order and re-issues
//! the external inputs at the positions they occupied in the original log.

use std::collections::VecDeque;

use crate::events::{EventBody, EventLog, SessionEvent};
use crate::feedback::{FeedbackRecord, RecordedFeedback};
use crate::gateway::Gateway;
use crate::planner::{NewSession, PlanError, Planner, SessionRun};
use crate::session::{FoldError, SessionStatus};

enum ExternalInput {
    Feedback(FeedbackRecord),
    Resume,
}

/// Splits the feedback in `events` into verdicts the provider answered
/// synchronously and inputs that arrived later, keyed by log position.
fn classify(events: &[SessionEvent]) -> (Vec<FeedbackRecord>, VecDeque<(usize, ExternalInput)>) {
    let mut synchronous = Vec::new();
    let mut external = VecDeque::new();
    for (i, event) in events.iter().enumerate() {
        match &event.body {
            EventBody::FeedbackApplied { record } => {
                let answered_inline = i > 0 && matches!(events[i - 1].body, EventBody::FeedbackRequested { .. });
                if answered_inline {
                    synchronous.push(record.clone());
                } else {
                    external.push_back((i, ExternalInput::Feedback(record.clone())));
                }
            }
            EventBody::StatusChanged {
                from: SessionStatus::Interrupted,
                to: SessionStatus::Running,
                ..
            } => external.push_back((i, ExternalInput::Resume)),
            _ => {}
        }
    }
    (synchronous, external)
}

/// Re-runs the session recorded in `events` against `gateway`, whose
/// backend must be positioned where the original run started.
pub fn replay(events: &[SessionEvent], gateway: &Gateway) -> Result<SessionRun, PlanError> {
    let first = events.first().ok_or(FoldError::Empty)?;
    let EventBody::SessionCreated {
        session_id,
        incident_id,
        context,
        ground_truth,
        settings,
        seed,
    } = &first.body
    else {
        return Err(FoldError::MissingCreation(first.body.type_name()).into());
    };
    let new = NewSession {
        session_id: session_id.clone(),
        incident_id: incident_id.clone(),
        context: context.clone(),
        ground_truth: ground_truth.clone(),
        settings: settings.clone(),
        seed: *seed,
    };
    let mut run = SessionRun::create(new, EventLog::in_memory())?;
    let (synchronous, mut external) = classify(events);
    let mut provider = RecordedFeedback::new(synchronous);
    let mut planner = Planner::new(gateway, &mut provider);
    while run.events().len() < events.len() {
        let position = run.events().len();
        if external.front().is_some_and(|(i, _)| *i <= position) {
            match external.pop_front().expect("checked").1 {
                ExternalInput::Feedback(record) => run.apply_feedback(record)?,
                ExternalInput::Resume => run.resume()?,
            }
            continue;
        }
        let before = run.events().len();
        let outcome = planner.step(&mut run);
        if run.events().len() == before {
            // No progress: either an error the original run also stopped
            // at, or the session is parked with no recorded input left.
            outcome?;
            break;
        }
    }
    Ok(run)
}
