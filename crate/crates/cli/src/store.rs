//! Persistent session store.
//!
//! Each session lives in three files under the store root:
//! `<id>.events.jsonl` (the append-only event log), `<id>.meta.json`
//! (backend descriptor and feedback provider) and, for scripted backends,
//! `<id>.script.jsonl`. Opening a store folds every log it finds and moves
//! scripted backends back to their recorded cursor, so a killed process
//! picks up exactly where the last complete append left it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use conplan_core::Gamma;
use conplan_planner::backend::{RemoteChatBackend, Script, ScriptedBackend};
use conplan_planner::events::{parse_json_lines, EventLog, LogError};
use conplan_planner::feedback::{DigitalTwinStub, FeedbackRecord, HumanProvider};
use conplan_planner::session::PendingFeedback;
use conplan_planner::{
    score_plan, Action, Backend, BackendDescriptor, BackendError, BackendKind, FeedbackProvider,
    FileSink, Gateway, IncidentRecord, NewSession, PlanError, PlanScore, PlanSession, Planner,
    PlannerSettings, ProviderKind, SessionEvent, SessionRun, SessionStatus, StepOutcome, Verdict,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("session {0} already exists")]
    AlreadyExists(String),
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// How a session's backend and feedback provider are rebuilt after restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub provider: ProviderKind,
    pub backend: BackendDescriptor,
}

/// Everything needed to start a session.
#[derive(Debug, Clone)]
pub struct CreateSession {
    pub session_id: String,
    pub record: IncidentRecord,
    pub settings: PlannerSettings,
    pub seed: u64,
    pub provider: ProviderKind,
    pub backend: BackendDescriptor,
    /// Replies for a scripted backend; defaults to the incident's
    /// ground-truth plan.
    pub script: Option<Script>,
}

/// A consistent copy of one session, safe to read while the session runs.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub session: PlanSession,
    pub events: Vec<SessionEvent>,
    pub meta: SessionMeta,
}

impl Snapshot {
    pub fn plan(&self) -> PlanArtifact {
        PlanArtifact::of(&self.session)
    }
}

/// The exported plan: ordered actions with explanations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub session_id: String,
    pub incident_id: Option<String>,
    pub status: SessionStatus,
    pub actions: Vec<Action>,
    pub feedback_records: usize,
    /// Metrics against the ground truth, when the session carries one.
    pub score: Option<PlanScore>,
}

impl PlanArtifact {
    pub fn of(session: &PlanSession) -> Self {
        let score = session.ground_truth.as_ref().map(|plan| {
            let record = IncidentRecord {
                incident_id: session.incident_id.clone().unwrap_or_default(),
                system_description: session.prompt_context.system_description.clone(),
                logs: session.prompt_context.logs.clone(),
                incident_summary: session.prompt_context.incident_summary.clone(),
                ground_truth: plan.clone(),
                attack_tactics: Vec::new(),
            };
            score_plan(&session.accepted_actions, &record, session.settings.limits.max_stages)
        });
        Self {
            session_id: session.session_id.clone(),
            incident_id: session.incident_id.clone(),
            status: session.status,
            actions: session.accepted_actions.clone(),
            feedback_records: session.feedback_records().count(),
            score,
        }
    }
}

/// One row of the awaiting-feedback index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub session_id: String,
    pub incident_id: Option<String>,
    pub pending: PendingFeedback,
    pub consistency: Option<f64>,
    pub threshold: Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advance {
    /// One outer-loop iteration.
    #[default]
    Step,
    /// Until the session completes, fails, is interrupted or parks.
    Run,
}

/// Verdict submitted by an operator for the pending abstention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSubmission {
    pub stage: usize,
    pub icl_iteration: usize,
    pub verdict: Verdict,
    pub rationale: String,
    #[serde(default)]
    pub reward: Option<f64>,
}

struct Entry {
    run: SessionRun,
    gateway: Gateway,
    provider: Box<dyn FeedbackProvider>,
    meta: SessionMeta,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
}

fn publish(run: &SessionRun, meta: &SessionMeta, target: &RwLock<Arc<Snapshot>>) -> Arc<Snapshot> {
    let snap = Arc::new(Snapshot {
        session: run.session().clone(),
        events: run.events().to_vec(),
        meta: meta.clone(),
    });
    *target.write().expect("snapshot lock") = snap.clone();
    snap
}

impl Entry {
    fn refresh(&self) -> Arc<Snapshot> {
        publish(&self.run, &self.meta, &self.snapshot)
    }
}

struct Slot {
    /// Serializes writers on one session.
    entry: Mutex<Entry>,
    /// Last published state; readers never wait for a running step.
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
}

/// Sessions keyed by id, persisted under one directory.
pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

fn validate_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

fn build_backend(meta: &SessionMeta, script: Option<Script>, seed: u64) -> Result<Arc<dyn Backend>, StoreError> {
    match meta.backend.kind {
        BackendKind::Scripted => {
            let script = script.ok_or_else(|| StoreError::Invalid("scripted backend without a script".into()))?;
            Ok(Arc::new(ScriptedBackend::new(script, seed).with_descriptor(meta.backend.clone())))
        }
        BackendKind::RemoteChat => Ok(Arc::new(RemoteChatBackend::new(meta.backend.clone())?)),
    }
}

fn build_provider(kind: ProviderKind, session: &PlanSession) -> Result<Box<dyn FeedbackProvider>, StoreError> {
    match kind {
        ProviderKind::Human => Ok(Box::new(HumanProvider)),
        ProviderKind::DigitalTwinStub => {
            let plan = session
                .ground_truth
                .clone()
                .ok_or_else(|| StoreError::Invalid("digital_twin_stub needs a ground-truth plan".into()))?;
            Ok(Box::new(DigitalTwinStub::new(plan)))
        }
        ProviderKind::ScriptedOracle => Err(StoreError::Invalid(
            "scripted_oracle feedback is only available to library callers".into(),
        )),
    }
}

/// Reads a log, discarding a trailing line cut off by a crash mid-append.
fn read_events(path: &Path) -> Result<Vec<SessionEvent>, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let complete = match text.rfind('\n') {
        Some(i) if i + 1 < text.len() => {
            warn!(path = %path.display(), "dropping incomplete trailing event");
            let keep = &text[..=i];
            fs::write(path, keep).map_err(|e| StoreError::io(path, e))?;
            keep
        }
        None if !text.is_empty() => {
            warn!(path = %path.display(), "dropping incomplete trailing event");
            fs::write(path, "").map_err(|e| StoreError::io(path, e))?;
            ""
        }
        _ => text.as_str(),
    };
    Ok(parse_json_lines(complete)?)
}

impl SessionStore {
    /// Opens (creating if needed) the store directory and loads every
    /// session in it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StoreError::io(&root, e))?;
        let store = Self {
            root,
            sessions: RwLock::new(HashMap::new()),
        };
        let mut ids = Vec::new();
        for item in fs::read_dir(&store.root).map_err(|e| StoreError::io(&store.root, e))? {
            let item = item.map_err(|e| StoreError::io(&store.root, e))?;
            let name = item.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".meta.json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        for id in ids {
            let slot = store.load(&id)?;
            store.sessions.write().expect("store lock").insert(id, slot);
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.events.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.meta.json"))
    }

    fn script_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.script.jsonl"))
    }

    fn load(&self, id: &str) -> Result<Arc<Slot>, StoreError> {
        let meta_path = self.meta_path(id);
        let text = fs::read_to_string(&meta_path).map_err(|e| StoreError::io(&meta_path, e))?;
        let meta: SessionMeta = serde_json::from_str(&text).map_err(|source| StoreError::Json {
            path: meta_path.clone(),
            source,
        })?;
        let events_path = self.events_path(id);
        let events = read_events(&events_path)?;
        let sink = FileSink::open(&events_path)?;
        let run = SessionRun::restore(events, Some(Box::new(sink)))?;
        let script = match meta.backend.kind {
            BackendKind::Scripted => Some(self.read_script(id)?),
            BackendKind::RemoteChat => None,
        };
        let backend = build_backend(&meta, script, run.session().rng_seed)?;
        let gateway = Gateway::new(backend);
        let mut provider = build_provider(meta.provider, run.session())?;
        Planner::new(&gateway, provider.as_mut()).sync_backend(&run)?;
        info!(session = id, status = %run.session().status, events = run.events().len(), "session loaded");
        Ok(Self::slot(run, gateway, provider, meta))
    }

    fn read_script(&self, id: &str) -> Result<Script, StoreError> {
        let path = self.script_path(id);
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        Script::from_json_lines(&text).map_err(|source| StoreError::Json { path, source })
    }

    fn slot(run: SessionRun, gateway: Gateway, provider: Box<dyn FeedbackProvider>, meta: SessionMeta) -> Arc<Slot> {
        let snapshot = Arc::new(RwLock::new(Arc::new(Snapshot {
            session: run.session().clone(),
            events: run.events().to_vec(),
            meta: meta.clone(),
        })));
        Arc::new(Slot {
            entry: Mutex::new(Entry {
                run,
                gateway,
                provider,
                meta,
                snapshot: snapshot.clone(),
            }),
            snapshot,
        })
    }

    /// Creates and persists a new session at stage 0, iteration 0.
    pub fn create(&self, spec: CreateSession) -> Result<Arc<Snapshot>, StoreError> {
        validate_id(&spec.session_id)?;
        spec.record
            .validate()
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        spec.backend
            .validate()
            .map_err(StoreError::Backend)?;
        let id = spec.session_id.clone();
        let mut sessions = self.sessions.write().expect("store lock");
        if sessions.contains_key(&id) || self.meta_path(&id).exists() || self.events_path(&id).exists() {
            return Err(StoreError::AlreadyExists(id));
        }
        let meta = SessionMeta {
            provider: spec.provider,
            backend: spec.backend.clone(),
        };
        let script = match spec.backend.kind {
            BackendKind::Scripted => Some(
                spec.script
                    .unwrap_or_else(|| Script::optimal_plan(&spec.record, spec.settings.n_candidates)),
            ),
            BackendKind::RemoteChat => None,
        };
        let new = NewSession::from_incident(&id, &spec.record, spec.settings, spec.seed);
        // Validate before touching the disk.
        new.settings.validate().map_err(PlanError::from)?;
        let backend = build_backend(&meta, script.clone(), spec.seed)?;

        if let Some(script) = &script {
            let path = self.script_path(&id);
            fs::write(&path, script.to_json_lines()).map_err(|e| StoreError::io(&path, e))?;
        }
        let events_path = self.events_path(&id);
        let sink = FileSink::open(&events_path)?;
        let run = SessionRun::create(new, EventLog::with_sink(Box::new(sink)))?;
        let provider = build_provider(meta.provider, run.session())?;
        // The meta file marks the session as present; write it last.
        let meta_path = self.meta_path(&id);
        let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, meta_json).map_err(|e| StoreError::io(&meta_path, e))?;

        let slot = Self::slot(run, Gateway::new(backend), provider, meta);
        let snap = slot.snapshot.read().expect("snapshot lock").clone();
        sessions.insert(id.clone(), slot);
        info!(session = %id, "session created");
        Ok(snap)
    }

    fn slot_of(&self, id: &str) -> Result<Arc<Slot>, StoreError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<Arc<Snapshot>, StoreError> {
        let slot = self.slot_of(id)?;
        let snap = slot.snapshot.read().expect("snapshot lock").clone();
        Ok(snap)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.sessions.read().expect("store lock").contains_key(id)
    }

    /// All sessions ordered by id.
    pub fn list(&self) -> Vec<Arc<Snapshot>> {
        let sessions = self.sessions.read().expect("store lock");
        let ordered: BTreeMap<&String, &Arc<Slot>> = sessions.iter().collect();
        ordered
            .values()
            .map(|slot| slot.snapshot.read().expect("snapshot lock").clone())
            .collect()
    }

    /// Sessions parked on a pending abstention.
    pub fn awaiting_feedback(&self) -> Vec<QueueEntry> {
        self.list()
            .into_iter()
            .filter(|s| s.session.status == SessionStatus::AwaitingFeedback)
            .filter_map(|s| {
                let pending = s.session.pending_feedback.clone()?;
                Some(QueueEntry {
                    session_id: s.session.session_id.clone(),
                    incident_id: s.session.incident_id.clone(),
                    consistency: s
                        .session
                        .current()
                        .and_then(|e| e.score.as_ref())
                        .map(|score| score.value),
                    threshold: s.session.settings.threshold,
                    pending,
                })
            })
            .collect()
    }

    fn with_entry<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Entry) -> Result<T, StoreError>,
    ) -> Result<(T, Arc<Snapshot>), StoreError> {
        let slot = self.slot_of(id)?;
        let mut entry = slot.entry.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
        let result = f(&mut entry);
        let snap = entry.refresh();
        result.map(|value| (value, snap))
    }

    /// Advances a session; returns the last step outcome.
    pub fn advance(&self, id: &str, how: Advance) -> Result<(StepOutcome, Arc<Snapshot>), StoreError> {
        self.with_entry(id, |entry| {
            let Entry {
                run,
                gateway,
                provider,
                meta,
                snapshot,
            } = entry;
            let mut planner = Planner::new(gateway, provider.as_mut());
            loop {
                let outcome = planner.step(run)?;
                publish(run, meta, snapshot);
                match (how, &outcome) {
                    (Advance::Run, StepOutcome::Selected(_)) => continue,
                    _ => return Ok(outcome),
                }
            }
        })
    }

    /// Applies an operator verdict to the pending abstention.
    pub fn submit_feedback(
        &self,
        id: &str,
        submission: FeedbackSubmission,
    ) -> Result<Arc<Snapshot>, StoreError> {
        self.with_entry(id, |entry| {
            let Some(pending) = entry.run.session().pending_feedback.clone() else {
                return Err(PlanError::Stale {
                    expected: "no feedback".into(),
                    got_stage: submission.stage,
                    got_iteration: submission.icl_iteration,
                }
                .into());
            };
            let record = FeedbackRecord {
                stage: submission.stage,
                icl_iteration: submission.icl_iteration,
                action: pending.action,
                verdict: submission.verdict,
                rationale: submission.rationale,
                reward: submission.reward,
                provider: ProviderKind::Human,
            };
            entry.run.apply_feedback(record)?;
            Ok(())
        })
        .map(|(_, snap)| snap)
    }

    /// Grants an interrupted session a fresh refinement budget.
    pub fn resume(&self, id: &str) -> Result<Arc<Snapshot>, StoreError> {
        self.with_entry(id, |entry| Ok(entry.run.resume()?))
            .map(|(_, snap)| snap)
    }
}
