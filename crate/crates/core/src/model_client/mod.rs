//! Chat-completion and text-embedding backends.
//!
//! Every agent call goes through [`ChatModel`]; anchors for the DPP relevance
//! vectors go through [`TextEmbedder`]. [`http`] speaks the OpenAI-compatible
//! wire format, [`mock`] replays JSONL fixtures deterministically.

pub mod http;
pub mod mock;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpChatClient, HttpEmbedClient};
pub use mock::{MockBackend, MockFixtures};

/// Which agent issued a call; routes mock fixtures and labels the ledger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentTag {
    Storyline,
    Hypothesis,
    TextDecision,
    VisionDecision,
    Meta,
    Suggestion,
}

impl AgentTag {
    pub const ALL: [AgentTag; 6] = [
        AgentTag::Storyline,
        AgentTag::Hypothesis,
        AgentTag::TextDecision,
        AgentTag::VisionDecision,
        AgentTag::Meta,
        AgentTag::Suggestion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentTag::Storyline => "storyline",
            AgentTag::Hypothesis => "hypothesis",
            AgentTag::TextDecision => "text_decision",
            AgentTag::VisionDecision => "vision_decision",
            AgentTag::Meta => "meta",
            AgentTag::Suggestion => "suggestion",
        }
    }
}

impl fmt::Display for AgentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, text: text.into(), image_refs: Vec::new() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into(), image_refs: Vec::new() }
    }

    pub fn with_images(mut self, refs: Vec<String>) -> Self {
        self.image_refs = refs;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    /// Scopes mock fixture cursors; never sent over the wire.
    pub run_id: String,
    pub agent: AgentTag,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(ClientError::InvalidRequest("no user message".into()));
        }
        if self.messages.iter().any(|m| m.role != Role::User && !m.image_refs.is_empty()) {
            return Err(ClientError::InvalidRequest("image_refs only allowed on user messages".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ClientError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// Concatenated message text, as the model sees it.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    /// Transport attempts spent, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("cannot decode response: {0}")]
    Decode(String),
    #[error("mock fixtures exhausted for run {run_id:?}, agent {agent}")]
    FixtureExhausted { run_id: String, agent: AgentTag },
    #[error("embedding error: {0}")]
    Embedding(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry - 1)`.
    pub fn delay_before(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(20);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }

    pub fn is_retryable_status(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }
}

pub trait ChatModel: Send + Sync {
    fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

pub trait TextEmbedder: Send + Sync {
    /// Unit-L2 embedding of `text`.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ClientError>;
}

/// The pair of backends a pipeline run needs.
#[derive(Clone)]
pub struct Clients {
    pub chat: Arc<dyn ChatModel>,
    pub embed: Arc<dyn TextEmbedder>,
}

impl Clients {
    pub fn new(chat: Arc<dyn ChatModel>, embed: Arc<dyn TextEmbedder>) -> Self {
        Self { chat, embed }
    }

    /// Both roles served by one mock backend.
    pub fn mock(backend: MockBackend) -> Self {
        let shared = Arc::new(backend);
        Self { chat: shared.clone(), embed: shared }
    }
}

pub(crate) fn unit_normalize(v: Vec<f64>) -> Result<Vec<f64>, ClientError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.is_empty() || !norm.is_finite() || norm == 0.0 {
        return Err(ClientError::Embedding("zero or non-finite embedding".into()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        let delays: Vec<u128> = (1..=4).map(|r| p.delay_before(r).as_millis()).collect();
        assert_eq!(delays, vec![500, 1000, 2000, 4000]);
    }

    #[test]
    fn retryable_statuses() {
        assert!(RetryPolicy::is_retryable_status(429));
        assert!(RetryPolicy::is_retryable_status(503));
        assert!(!RetryPolicy::is_retryable_status(401));
        assert!(!RetryPolicy::is_retryable_status(400));
    }

    #[test]
    fn request_validation() {
        let mut req = ChatRequest {
            run_id: "r".into(),
            agent: AgentTag::Meta,
            model: "m".into(),
            messages: vec![Message::system("sys")],
            temperature: 0.0,
            max_tokens: 16,
        };
        assert!(req.validate().is_err());
        req.messages.push(Message::user("hi"));
        assert!(req.validate().is_ok());
        req.messages[0].image_refs.push("x.jpg".into());
        assert!(req.validate().is_err());
    }
}
