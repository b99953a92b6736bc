//! Append-only session event log.
//!
//! Every state change of a planning session is recorded as one event with a
//! strictly increasing sequence number. Logs are persisted as JSON lines and
//! the session state is rebuilt by folding the events in order.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use conplan_core::{Decision, Score};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, RecoveryState};
use crate::feedback::FeedbackRecord;
use crate::gateway::CandidateSet;
use crate::harness::{GroundTruthPlan, Verdict};
use crate::prompt::PromptContext;
use crate::session::{PlannerSettings, SessionStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    SessionCreated {
        session_id: String,
        incident_id: Option<String>,
        context: PromptContext,
        ground_truth: Option<GroundTruthPlan>,
        settings: PlannerSettings,
        seed: u64,
    },
    CandidatesGenerated {
        candidates: CandidateSet,
        attempt: u32,
        backend_cursor: Option<u64>,
    },
    GenerationFailed {
        stage: usize,
        icl_iteration: usize,
        attempt: u32,
        error: String,
        backend_cursor: Option<u64>,
    },
    ConsistencyEvaluated {
        stage: usize,
        icl_iteration: usize,
        score: Score,
        constraint_violation: Option<String>,
    },
    Decided {
        stage: usize,
        icl_iteration: usize,
        decision: Decision,
    },
    ActionAccepted {
        stage: usize,
        candidate_index: usize,
        action: Action,
        verdict: Option<Verdict>,
        state_after: RecoveryState,
    },
    FeedbackRequested {
        stage: usize,
        icl_iteration: usize,
        candidate_index: usize,
        action: Action,
    },
    FeedbackApplied {
        record: FeedbackRecord,
    },
    CompletionChecked {
        stage: usize,
        ground_truth: Option<bool>,
        backend: Option<bool>,
        backend_error: Option<String>,
        complete: bool,
        disagreement: bool,
        backend_cursor: Option<u64>,
    },
    StatusChanged {
        from: SessionStatus,
        to: SessionStatus,
        reason: String,
    },
    Resumed {
        icl_iteration: usize,
    },
}

impl EventBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            EventBody::SessionCreated { .. } => "session_created",
            EventBody::CandidatesGenerated { .. } => "candidates_generated",
            EventBody::GenerationFailed { .. } => "generation_failed",
            EventBody::ConsistencyEvaluated { .. } => "consistency_evaluated",
            EventBody::Decided { .. } => "decided",
            EventBody::ActionAccepted { .. } => "action_accepted",
            EventBody::FeedbackRequested { .. } => "feedback_requested",
            EventBody::FeedbackApplied { .. } => "feedback_applied",
            EventBody::CompletionChecked { .. } => "completion_checked",
            EventBody::StatusChanged { .. } => "status_changed",
            EventBody::Resumed { .. } => "resumed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("event log line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("event log sequence broken at line {line}: expected {expected}, found {found}")]
    Sequence { line: usize, expected: u64, found: u64 },
}

/// Destination for appended events.
pub trait EventSink: Send {
    fn append(&mut self, event: &SessionEvent) -> io::Result<()>;
}

/// Appends one JSON line per event and flushes after each append.
pub struct FileSink {
    path: PathBuf,
    file: File,
}

impl FileSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| LogError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for FileSink {
    fn append(&mut self, event: &SessionEvent) -> io::Result<()> {
        let mut line = event.to_line();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

/// In-memory log with an optional persistent sink.
#[derive(Default)]
pub struct EventLog {
    events: Vec<SessionEvent>,
    sink: Option<Box<dyn EventSink>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("events", &self.events.len())
            .field("persistent", &self.sink.is_some())
            .finish()
    }
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_sink(sink: Box<dyn EventSink>) -> Self {
        Self {
            events: Vec::new(),
            sink: Some(sink),
        }
    }

    /// Wraps already-persisted events; new events go to `sink`.
    pub fn restore(events: Vec<SessionEvent>, sink: Option<Box<dyn EventSink>>) -> Self {
        Self { events, sink }
    }

    pub fn next_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq + 1)
    }

    pub fn append(&mut self, body: EventBody) -> io::Result<&SessionEvent> {
        let event = SessionEvent {
            seq: self.next_seq(),
            body,
        };
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&event)?;
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn to_json_lines(&self) -> String {
        to_json_lines(&self.events)
    }
}

pub fn to_json_lines(events: &[SessionEvent]) -> String {
    events.iter().map(|e| e.to_line() + "\n").collect()
}

/// Parses JSON lines and checks that sequence numbers count up from 0.
pub fn parse_json_lines(text: &str) -> Result<Vec<SessionEvent>, LogError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: SessionEvent =
            serde_json::from_str(line).map_err(|source| LogError::Decode { line: i + 1, source })?;
        let expected = events.len() as u64;
        if event.seq != expected {
            return Err(LogError::Sequence {
                line: i + 1,
                expected,
                found: event.seq,
            });
        }
        events.push(event);
    }
    Ok(events)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<SessionEvent>, LogError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_json_lines(&text)
}
