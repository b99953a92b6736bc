//! Incident corpus and plan scoring.
//!
//! An action is effective when it accomplishes a ground-truth step whose
//! criteria are not all satisfied yet. Matching uses the step's equivalence
//! hints: any hint appearing in the action text (case-insensitive) counts.
//! Everything else, including repeats of finished steps, is ineffective.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, Criterion, RecoveryState};

/// Default number of actions after which a recovery counts as failed.
pub const DEFAULT_STAGE_CAP: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub action_text: String,
    pub criteria_satisfied: Vec<Criterion>,
    pub equivalence_hints: Vec<String>,
}

impl PlanStep {
    pub fn matches(&self, action_text: &str) -> bool {
        let haystack = action_text.to_lowercase();
        self.equivalence_hints
            .iter()
            .any(|hint| haystack.contains(&hint.to_lowercase()))
    }

    pub fn is_done(&self, state: &RecoveryState) -> bool {
        self.criteria_satisfied.iter().all(|&c| state.get(c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthPlan {
    pub steps: Vec<PlanStep>,
}

impl GroundTruthPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn covered_criteria(&self) -> BTreeSet<Criterion> {
        self.steps
            .iter()
            .flat_map(|s| s.criteria_satisfied.iter().copied())
            .collect()
    }

    /// The ground-truth steps as actions.
    pub fn actions(&self) -> Vec<Action> {
        self.steps
            .iter()
            .map(|s| Action {
                action_text: s.action_text.clone(),
                explanation: format!(
                    "Satisfies {}.",
                    s.criteria_satisfied
                        .iter()
                        .map(|c| c.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
                origin: crate::action::ActionOrigin::GroundTruth,
            })
            .collect()
    }

    /// Number of ground-truth steps still needed from `state`.
    pub fn remaining_from(&self, state: &RecoveryState) -> usize {
        self.steps.iter().filter(|s| !s.is_done(state)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub incident_id: String,
    pub system_description: String,
    pub logs: Vec<String>,
    pub incident_summary: String,
    pub ground_truth: GroundTruthPlan,
    #[serde(default)]
    pub attack_tactics: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed incident file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("incident {incident_id}: invalid field `{field}`: {reason}")]
    Invalid {
        incident_id: String,
        field: &'static str,
        reason: String,
    },
}

impl IncidentRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |field, reason: String| CorpusError::Invalid {
            incident_id: self.incident_id.clone(),
            field,
            reason,
        };
        if self.incident_id.trim().is_empty() {
            return Err(invalid("incident_id", "empty".into()));
        }
        if self.logs.is_empty() {
            return Err(invalid("logs", "no log lines".into()));
        }
        if self.ground_truth.is_empty() {
            return Err(invalid("ground_truth", "no steps".into()));
        }
        for (i, step) in self.ground_truth.steps.iter().enumerate() {
            if step.action_text.trim().is_empty() {
                return Err(invalid("ground_truth", format!("step {} has no action text", i + 1)));
            }
            if step.criteria_satisfied.is_empty() {
                return Err(invalid("ground_truth", format!("step {} satisfies no criteria", i + 1)));
            }
            if step.equivalence_hints.iter().all(|h| h.trim().is_empty()) {
                return Err(invalid("ground_truth", format!("step {} has no equivalence hints", i + 1)));
            }
        }
        let covered = self.ground_truth.covered_criteria();
        let missing: Vec<&str> = Criterion::ALL
            .iter()
            .filter(|c| !covered.contains(c))
            .map(|c| c.name())
            .collect();
        if !missing.is_empty() {
            return Err(invalid(
                "ground_truth",
                format!("criteria never satisfied: {}", missing.join(", ")),
            ));
        }
        Ok(())
    }
}

/// Loads incidents from a directory of `*.json` files (sorted by file name)
/// or from a single file holding one record or an array of records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<IncidentRecord>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(io_err)?;
    let mut records = Vec::new();
    if meta.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        files.sort();
        for file in files {
            records.extend(read_incident_file(&file)?);
        }
    } else {
        records.extend(read_incident_file(path)?);
    }
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

fn read_incident_file(path: &Path) -> Result<Vec<IncidentRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let json_err = |source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    if value.is_array() {
        serde_json::from_value(value).map_err(json_err)
    } else {
        serde_json::from_value(value).map(|r| vec![r]).map_err(json_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Effective,
    Ineffective,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Judgement {
    pub verdict: Verdict,
    pub new_state: RecoveryState,
    /// 0-based index of the matched ground-truth step.
    pub matched_step: Option<usize>,
}

/// Judges one action against the ground truth from the given state.
pub fn judge_action(action: &Action, plan: &GroundTruthPlan, state: &RecoveryState) -> Judgement {
    let matched = plan
        .steps
        .iter()
        .enumerate()
        .find(|(_, step)| !step.is_done(state) && step.matches(&action.action_text));
    match matched {
        Some((index, step)) => {
            let mut new_state = *state;
            for &c in &step.criteria_satisfied {
                new_state.set(c);
            }
            Judgement {
                verdict: Verdict::Effective,
                new_state,
                matched_step: Some(index),
            }
        }
        None => Judgement {
            verdict: Verdict::Ineffective,
            new_state: *state,
            matched_step: None,
        },
    }
}

/// Metrics for one plan on one incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanScore {
    pub incident_id: String,
    pub recovery_time: usize,
    pub ineffective_pct: f64,
    pub failed: bool,
    pub actions_consumed: usize,
    pub ineffective_actions: usize,
}

pub fn score_plan(actions: &[Action], record: &IncidentRecord, stage_cap: usize) -> PlanScore {
    let stage_cap = stage_cap.max(1);
    let mut state = RecoveryState::default();
    let mut ineffective = 0usize;
    let mut consumed = 0usize;
    let mut recovered_at = None;
    for action in actions.iter().take(stage_cap) {
        consumed += 1;
        let j = judge_action(action, &record.ground_truth, &state);
        if j.verdict == Verdict::Ineffective {
            ineffective += 1;
        }
        state = j.new_state;
        if state.is_recovered() {
            recovered_at = Some(consumed);
            break;
        }
    }
    let ineffective_pct = if consumed == 0 {
        0.0
    } else {
        100.0 * ineffective as f64 / consumed as f64
    };
    PlanScore {
        incident_id: record.incident_id.clone(),
        recovery_time: recovered_at.unwrap_or(stage_cap),
        ineffective_pct,
        failed: recovered_at.is_none(),
        actions_consumed: consumed,
        ineffective_actions: ineffective,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Mean and sample standard deviation; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentAggregate {
    pub incident_id: String,
    pub runs: usize,
    pub recovery_time: Summary,
    pub ineffective_pct: Summary,
    pub failed_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<PlanScore>,
    pub per_incident: Vec<IncidentAggregate>,
    pub recovery_time: Option<Summary>,
    pub ineffective_pct: Option<Summary>,
    pub failed_pct: f64,
}

impl EvalReport {
    /// Aggregates rows, typically one per (incident, seed).
    pub fn from_rows(rows: Vec<PlanScore>) -> Self {
        let mut ids: Vec<&str> = Vec::new();
        for r in &rows {
            if !ids.contains(&r.incident_id.as_str()) {
                ids.push(&r.incident_id);
            }
        }
        let per_incident = ids
            .iter()
            .map(|id| {
                let mine: Vec<&PlanScore> = rows.iter().filter(|r| r.incident_id == *id).collect();
                let rt: Vec<f64> = mine.iter().map(|r| r.recovery_time as f64).collect();
                let ip: Vec<f64> = mine.iter().map(|r| r.ineffective_pct).collect();
                IncidentAggregate {
                    incident_id: id.to_string(),
                    runs: mine.len(),
                    recovery_time: Summary::of(&rt).expect("non-empty group"),
                    ineffective_pct: Summary::of(&ip).expect("non-empty group"),
                    failed_pct: 100.0 * mine.iter().filter(|r| r.failed).count() as f64
                        / mine.len() as f64,
                }
            })
            .collect();
        let rt: Vec<f64> = rows.iter().map(|r| r.recovery_time as f64).collect();
        let ip: Vec<f64> = rows.iter().map(|r| r.ineffective_pct).collect();
        let failed_pct = if rows.is_empty() {
            0.0
        } else {
            100.0 * rows.iter().filter(|r| r.failed).count() as f64 / rows.len() as f64
        };
        Self {
            recovery_time: Summary::of(&rt),
            ineffective_pct: Summary::of(&ip),
            failed_pct,
            per_incident,
            rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionOrigin;

    fn step(text: &str, c: Criterion, hints: &[&str]) -> PlanStep {
        PlanStep {
            action_text: text.into(),
            criteria_satisfied: vec![c],
            equivalence_hints: hints.iter().map(|h| h.to_string()).collect(),
        }
    }

    fn record() -> IncidentRecord {
        IncidentRecord {
            incident_id: "t".into(),
            system_description: "s".into(),
            logs: vec!["l".into()],
            incident_summary: "i".into(),
            ground_truth: GroundTruthPlan {
                steps: vec![
                    step("Disconnect host", Criterion::Contained, &["disconnect", "isolate"]),
                    step("Scan traffic", Criterion::Assessed, &["scan"]),
                    step("Take a forensic image of the disk", Criterion::Preserved, &["forensic image"]),
                    step("Wipe disk", Criterion::Evicted, &["wipe"]),
                    step("Upgrade OS", Criterion::Hardened, &["upgrade"]),
                    step("Restore backup", Criterion::Restored, &["restore"]),
                ],
            },
            attack_tactics: vec![],
        }
    }

    fn act(text: &str) -> Action {
        Action::new(text, "", ActionOrigin::Generated).unwrap()
    }

    #[test]
    fn containment_hint_is_effective() {
        let r = record();
        let j = judge_action(
            &act("Disconnect the Ethernet cable of 147.32.84.165"),
            &r.ground_truth,
            &RecoveryState::default(),
        );
        assert_eq!(j.verdict, Verdict::Effective);
        assert!(j.new_state.contained);
        assert_eq!(j.matched_step, Some(0));
    }

    #[test]
    fn repeated_step_is_ineffective() {
        let r = record();
        let mut state = RecoveryState::default();
        state.set(Criterion::Contained);
        let j = judge_action(&act("ISOLATE the server"), &r.ground_truth, &state);
        assert_eq!(j.verdict, Verdict::Ineffective);
        assert_eq!(j.new_state, state);
    }

    #[test]
    fn unmatched_action_is_ineffective() {
        let r = record();
        let j = judge_action(&act("Send a memo"), &r.ground_truth, &RecoveryState::default());
        assert_eq!(j.verdict, Verdict::Ineffective);
        assert_eq!(j.matched_step, None);
    }

    #[test]
    fn optimal_plan_scores_six() {
        let r = record();
        let s = score_plan(&r.ground_truth.actions(), &r, DEFAULT_STAGE_CAP);
        assert_eq!(s.recovery_time, 6);
        assert_eq!(s.ineffective_pct, 0.0);
        assert!(!s.failed);
    }

    #[test]
    fn two_useless_actions_of_eight() {
        let r = record();
        let mut actions = r.ground_truth.actions();
        actions.insert(2, act("Send a memo"));
        actions.insert(5, act("Reboot nothing"));
        let s = score_plan(&actions, &r, DEFAULT_STAGE_CAP);
        assert_eq!(s.recovery_time, 8);
        assert_eq!(s.ineffective_pct, 25.0);
        assert!(!s.failed);
    }

    #[test]
    fn empty_plan_fails_at_cap() {
        let r = record();
        let s = score_plan(&[], &r, 30);
        assert!(s.failed);
        assert_eq!(s.recovery_time, 30);
        assert_eq!(s.ineffective_pct, 0.0);
    }

    #[test]
    fn actions_past_cap_are_ignored() {
        let r = record();
        let s = score_plan(&r.ground_truth.actions(), &r, 3);
        assert!(s.failed);
        assert_eq!(s.actions_consumed, 3);
        assert_eq!(s.recovery_time, 3);
    }

    #[test]
    fn validation_reports_missing_criterion() {
        let mut r = record();
        r.ground_truth.steps.pop();
        let err = r.validate().unwrap_err();
        match err {
            CorpusError::Invalid { incident_id, field, reason } => {
                assert_eq!(incident_id, "t");
                assert_eq!(field, "ground_truth");
                assert!(reason.contains("restored"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut r = record();
        r.logs.clear();
        assert!(matches!(r.validate(), Err(CorpusError::Invalid { field: "logs", .. })));
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.std, 2.0);
        assert_eq!((s.min, s.max), (2.0, 6.0));
        assert_eq!(Summary::of(&[5.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }
}
