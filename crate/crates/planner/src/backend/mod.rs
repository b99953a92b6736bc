//! Text-completion backends.
//!
//! A backend turns a rendered prompt into a completion. Two implementations
//! exist: [`RemoteChatBackend`] speaks the chat-completions HTTP protocol and
//! [`ScriptedBackend`] replays a fixed script for tests and offline runs.

pub mod remote;
pub mod scripted;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

pub use remote::RemoteChatBackend;
pub use scripted::{Script, ScriptBuilder, ScriptEntry, ScriptedBackend, TraceEntry};

/// Environment variable holding the bearer token for remote backends.
pub const API_KEY_ENV: &str = "CONPLAN_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteChat,
    Scripted,
}

/// Static configuration of a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<Url>,
    pub model_name: String,
    pub request_timeout_ms: u64,
    pub max_output_tokens: u32,
    /// Sampling temperature for action generation.
    pub temperature: f64,
    /// Sampling temperature for lookahead and completion queries.
    pub lookahead_temperature: f64,
    /// Extra attempts per request after a transport failure or an
    /// unparseable completion.
    pub retry_budget: u32,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: "scripted".into(),
            request_timeout_ms: 120_000,
            max_output_tokens: 4096,
            temperature: 0.7,
            lookahead_temperature: 0.0,
            retry_budget: 1,
        }
    }
}

impl BackendDescriptor {
    pub fn scripted() -> Self {
        Self::default()
    }

    pub fn remote(endpoint: Url, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::RemoteChat,
            endpoint: Some(endpoint),
            model_name: model_name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::RemoteChat && self.endpoint.is_none() {
            return Err(BackendError::Config("remote_chat backend needs an endpoint".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0)
            || !(self.lookahead_temperature.is_finite() && self.lookahead_temperature >= 0.0)
        {
            return Err(BackendError::Config("temperatures must be non-negative".into()));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPurpose {
    GenerateAction,
    PredictLookahead,
    CheckCompletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub purpose: RequestPurpose,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("script exhausted after {consumed} completions")]
    ScriptExhausted { consumed: u64 },
    #[error("injected fault: {0}")]
    InjectedFault(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether retrying the same request can help.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_)
                | BackendError::Timeout
                | BackendError::InjectedFault(_)
                | BackendError::Http { status: 429 | 500..=599, .. }
        )
    }
}

/// A completion provider. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;

    /// Completes a batch; result `i` belongs to request `i`.
    ///
    /// The default issues all requests concurrently.
    fn complete_batch(&self, requests: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        if requests.len() <= 1 {
            return requests.iter().map(|r| self.complete(r)).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = requests
                .iter()
                .map(|r| scope.spawn(move || self.complete(r)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(BackendError::Transport("request thread panicked".into())))
                })
                .collect()
        })
    }

    /// Replay position for backends that have one.
    fn cursor(&self) -> Option<u64> {
        None
    }

    /// Moves the replay position, e.g. when resuming a persisted session.
    fn seek(&self, _position: u64) -> Result<(), BackendError> {
        Ok(())
    }
}
