use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{Backend, BackendDescriptor, BackendError, BackendKind, CompletionRequest, API_KEY_ENV};

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
    /// Some servers return the reasoning block separately.
    #[serde(default)]
    reasoning_content: Option<String>,
}

/// Chat-completions client: POSTs `{model, messages, temperature,
/// max_tokens, seed}` to the endpoint and returns the first choice's text.
pub struct RemoteChatBackend {
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl RemoteChatBackend {
    /// Reads the API key from `CONPLAN_API_KEY` when set.
    ///
    /// Must not be called from inside an async runtime.
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(descriptor, api_key)
    }

    pub fn with_api_key(descriptor: BackendDescriptor, api_key: Option<String>) -> Result<Self, BackendError> {
        descriptor.validate()?;
        if descriptor.kind != BackendKind::RemoteChat {
            return Err(BackendError::Config("descriptor is not a remote_chat backend".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(descriptor.request_timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            descriptor,
            client,
            api_key,
        })
    }
}

impl Backend for RemoteChatBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let endpoint = self
            .descriptor
            .endpoint
            .as_ref()
            .ok_or_else(|| BackendError::Config("missing endpoint".into()))?;
        let body = ChatRequest {
            model: &self.descriptor.model_name,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        debug!(purpose = ?request.purpose, endpoint = %endpoint, "chat completion request");
        let mut builder = self.client.post(endpoint.clone()).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        let reply = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Decode("response has no choices".into()))?
            .message;
        let content = reply.content.unwrap_or_default();
        Ok(match reply.reasoning_content {
            Some(reasoning) if !content.contains("</think>") => {
                format!("{reasoning}</think>{content}")
            }
            _ => content,
        })
    }
}
