//! Chat-completion backends: message shapes, bindings, the scripted mock,
//! request rendering, and the gateway that fronts every outbound call.

mod gateway;
mod mock;
mod render;

pub use gateway::{CallRecord, Gateway};
pub use mock::{whitespace_tokens, MockReply, MockRule, MockScript};
pub use render::render_chat_request;

use std::ops::{Add, AddAssign};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::duration_millis;
use crate::types::{ImageRef, InvariantError, RunConfig};

/// Speaker of a chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One piece of message content: text or an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentPart {
    Text(String),
    Image(ImageRef),
}

/// A chat message; multimodal content is a sequence of parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn user_with_images(text: impl Into<String>, images: &[ImageRef]) -> Self {
        let mut content = vec![ContentPart::Text(text.into())];
        content.extend(images.iter().cloned().map(ContentPart::Image));
        Message {
            role: Role::User,
            content,
        }
    }

    /// Concatenated text parts, newline-joined. Images contribute nothing.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|part| match part {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn has_images(&self) -> bool {
        self.content
            .iter()
            .any(|part| matches!(part, ContentPart::Image(_)))
    }
}

/// Where calls for a binding actually go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-style chat-completions endpoint.
    Http {
        endpoint: String,
        /// Name of the environment variable holding the bearer token. The
        /// variable is read at call time and its value is never persisted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env_var: Option<String>,
    },
    /// In-process scripted backend (zero wall-clock, deterministic).
    Mock,
}

/// A model identity plus the transport used to reach it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendBinding {
    #[serde(flatten)]
    pub kind: BackendKind,
    pub model_id: String,
    /// Whether the bound model accepts image content.
    #[serde(default)]
    pub vision: bool,
}

impl BackendBinding {
    pub fn mock(model_id: impl Into<String>) -> Self {
        BackendBinding {
            kind: BackendKind::Mock,
            model_id: model_id.into(),
            vision: false,
        }
    }

    pub fn http(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        BackendBinding {
            kind: BackendKind::Http {
                endpoint: endpoint.into(),
                auth_env_var: None,
            },
            model_id: model_id.into(),
            vision: false,
        }
    }

    pub fn with_vision(mut self) -> Self {
        self.vision = true;
        self
    }

    pub fn with_auth_env(mut self, var: impl Into<String>) -> Self {
        if let BackendKind::Http { auth_env_var, .. } = &mut self.kind {
            *auth_env_var = Some(var.into());
        }
        self
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.kind, BackendKind::Mock)
    }

    /// Stable ledger key: transport-qualified model identity.
    pub fn key(&self) -> String {
        match &self.kind {
            BackendKind::Http { endpoint, .. } => format!("http:{}@{endpoint}", self.model_id),
            BackendKind::Mock => format!("mock:{}", self.model_id),
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.model_id.trim().is_empty() {
            return Err(InvariantError::new("binding model_id: empty"));
        }
        if let BackendKind::Http { endpoint, .. } = &self.kind {
            if endpoint.trim().is_empty() {
                return Err(InvariantError::new(format!(
                    "binding endpoint: empty for model '{}'",
                    self.model_id
                )));
            }
        }
        Ok(())
    }
}

/// Token and call accounting. All fields add independently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Attempts actually made, retries included.
    pub call_count: u64,
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
            call_count: self.call_count + rhs.call_count,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl Usage {
    pub fn sum(parts: impl IntoIterator<Item = Usage>) -> Usage {
        parts.into_iter().fold(Usage::default(), Usage::add)
    }
}

/// One successful completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    #[serde(with = "duration_millis", rename = "latency_ms")]
    pub latency: Duration,
}

/// Per-call knobs, derived from the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CallParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl From<&RunConfig> for CallParams {
    fn from(cfg: &RunConfig) -> Self {
        CallParams {
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            timeout: cfg.per_call_timeout,
            max_retries: cfg.max_retries,
        }
    }
}

impl Default for CallParams {
    fn default() -> Self {
        CallParams::from(&RunConfig::default())
    }
}

/// Everything that can go wrong talking to a backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("call timed out after {0:?}")]
    Timeout(Duration),
    #[error("remote returned status {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("image content sent to non-vision binding '{0}'")]
    CapabilityMismatch(String),
    #[error("no mock script registered for model '{0}'")]
    NoScript(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("failed to load image: {0}")]
    Image(String),
    #[error("auth env var '{0}' is not set")]
    MissingAuth(String),
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
}

impl BackendError {
    /// Stable failure class for transcripts and logs.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Timeout(_) => "timeout",
            BackendError::Remote { .. } => "remote",
            BackendError::Transport(_) => "transport",
            BackendError::CapabilityMismatch(_) => "capability_mismatch",
            BackendError::NoScript(_) => "no_script",
            BackendError::Scripted(_) => "scripted",
            BackendError::InvalidRequest(_) => "invalid_request",
            BackendError::Image(_) => "image",
            BackendError::MissingAuth(_) => "missing_auth",
            BackendError::MalformedResponse(_) => "malformed_response",
        }
    }

    /// Only transient transport-level failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::Transport(_) => true,
            BackendError::Remote { status, .. } => {
                *status == 408 || *status == 429 || (500..=599).contains(status)
            }
            _ => false,
        }
    }
}
