//! Regret accounting over the feedback collected in a session.
//!
//! The instantaneous regret of a feedback record is `optimal_reward` minus
//! its reward. Records without a numeric reward count effective as 1 and
//! ineffective as 0.

use conplan_core::{DomainError, RegretTrace};
use serde::{Deserialize, Serialize};

use crate::events::{EventBody, SessionEvent};
use crate::feedback::FeedbackRecord;

/// Regret over the refinement iterations of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRegret {
    pub stage: usize,
    pub trace: RegretTrace,
}

pub fn feedback_regret<'a>(
    records: impl IntoIterator<Item = &'a FeedbackRecord>,
    optimal_reward: f64,
    arms: usize,
    constant: f64,
) -> RegretTrace {
    let per_iteration = records
        .into_iter()
        .map(|r| optimal_reward - r.reward_or_default())
        .collect();
    RegretTrace::from_per_iteration(per_iteration, arms, constant)
}

/// Feedback records in the order they were applied.
pub fn applied_feedback(events: &[SessionEvent]) -> impl Iterator<Item = &FeedbackRecord> {
    events.iter().filter_map(|e| match &e.body {
        EventBody::FeedbackApplied { record } => Some(record),
        _ => None,
    })
}

/// One regret trace per stage that received feedback.
///
/// Fails when the log holds no feedback, since there is no reward to
/// account for.
pub fn session_regret(
    events: &[SessionEvent],
    optimal_reward: f64,
    arms: usize,
    constant: f64,
) -> Result<Vec<StageRegret>, DomainError> {
    if !optimal_reward.is_finite() {
        return Err(DomainError::InvalidParameter(format!(
            "optimal reward must be finite, got {optimal_reward}"
        )));
    }
    let mut groups: Vec<(usize, Vec<&FeedbackRecord>)> = Vec::new();
    for r in applied_feedback(events) {
        match groups.last_mut() {
            Some((stage, group)) if *stage == r.stage => group.push(r),
            _ => groups.push((r.stage, vec![r])),
        }
    }
    if groups.is_empty() {
        return Err(DomainError::InvalidParameter("event log contains no feedback rewards".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(stage, group)| StageRegret {
            stage,
            trace: feedback_regret(group, optimal_reward, arms, constant),
        })
        .collect())
}
