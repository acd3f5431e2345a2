//! OpenAI-compatible HTTP backends.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    unit_normalize, ChatModel, ChatRequest, ChatResponse, ClientError, RetryPolicy, Role, TextEmbedder,
    Usage,
};

pub const API_KEY_ENV: &str = "SVAGENT_API_KEY";

enum Failure {
    Retryable(String),
    Fatal(ClientError),
}

/// Shared transport: bearer auth, retries with exponential backoff.
#[derive(Clone)]
struct Transport {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    policy: RetryPolicy,
}

impl Transport {
    fn new(base_url: &str, api_key: Option<String>, policy: RetryPolicy, timeout: Duration) -> Result<Self, ClientError> {
        if policy.max_attempts == 0 {
            return Err(ClientError::InvalidRequest("max_attempts must be >= 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            http,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            policy,
        })
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let mut rb = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| Failure::Retryable(e.to_string()))?;
        if (200..300).contains(&status) {
            return serde_json::from_str(&text).map_err(|e| Failure::Fatal(ClientError::Decode(e.to_string())));
        }
        if RetryPolicy::is_retryable_status(status) {
            Err(Failure::Retryable(format!("HTTP {status}: {text}")))
        } else {
            Err(Failure::Fatal(ClientError::Status { status, body: text }))
        }
    }

    /// Returns the decoded body and the number of attempts used.
    fn post(&self, path: &str, body: &Value) -> Result<(Value, u32), ClientError> {
        let url = format!("{}{path}", self.base_url);
        let mut last = String::new();
        for attempt in 1..=self.policy.max_attempts {
            if attempt > 1 {
                thread::sleep(self.policy.delay_before(attempt - 1));
            }
            match self.attempt(&url, body) {
                Ok(v) => return Ok((v, attempt)),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    log::warn!("{url}: attempt {attempt} failed: {msg}");
                    last = msg;
                }
            }
        }
        Err(ClientError::RetriesExhausted { attempts: self.policy.max_attempts, last })
    }
}

pub struct HttpChatClient {
    transport: Transport,
}

impl HttpChatClient {
    pub fn new(base_url: &str, api_key: Option<String>, policy: RetryPolicy) -> Result<Self, ClientError> {
        Ok(Self { transport: Transport::new(base_url, api_key, policy, Duration::from_secs(120))? })
    }

    /// Reads the bearer token from `SVAGENT_API_KEY`.
    pub fn from_env(base_url: &str, policy: RetryPolicy) -> Result<Self, ClientError> {
        Self::new(base_url, std::env::var(API_KEY_ENV).ok(), policy)
    }
}

/// `http(s)://` and `data:` refs pass through; anything else is read from disk
/// (an optional `file://` prefix is stripped) and inlined as base64.
pub fn resolve_image_ref(image_ref: &str) -> Result<String, ClientError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref.strip_prefix("file://").unwrap_or(image_ref));
    let bytes = fs::read(path)
        .map_err(|e| ClientError::InvalidRequest(format!("image {}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/jpeg",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

pub fn chat_request_body(req: &ChatRequest) -> Result<Value, ClientError> {
    let mut messages = Vec::with_capacity(req.messages.len());
    for m in &req.messages {
        let mut content = vec![json!({"type": "text", "text": m.text})];
        for r in &m.image_refs {
            content.push(json!({"type": "image_url", "image_url": {"url": resolve_image_ref(r)?}}));
        }
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
        };
        messages.push(json!({"role": role, "content": content}));
    }
    Ok(json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }))
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<Value>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn content_text(v: Option<Value>) -> String {
    match v {
        Some(Value::String(s)) => s,
        // content-part arrays: concatenate text parts
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    }
}

impl ChatModel for HttpChatClient {
    fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        req.validate()?;
        let body = chat_request_body(req)?;
        let start = Instant::now();
        let (value, attempts) = self.transport.post("/v1/chat/completions", &body)?;
        let latency_ms = start.elapsed().as_millis() as u64;
        let parsed: CompletionBody =
            serde_json::from_value(value).map_err(|e| ClientError::Decode(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Decode("no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(ChatResponse { text: content_text(choice.message.content), usage, latency_ms, attempts })
    }
}

pub struct HttpEmbedClient {
    transport: Transport,
    model: String,
}

impl HttpEmbedClient {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, policy: RetryPolicy) -> Result<Self, ClientError> {
        Ok(Self {
            transport: Transport::new(base_url, api_key, policy, Duration::from_secs(60))?,
            model: model.to_string(),
        })
    }

    pub fn from_env(base_url: &str, model: &str, policy: RetryPolicy) -> Result<Self, ClientError> {
        Self::new(base_url, model, std::env::var(API_KEY_ENV).ok(), policy)
    }
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl TextEmbedder for HttpEmbedClient {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ClientError> {
        if text.is_empty() {
            return Err(ClientError::Embedding("empty text".into()));
        }
        let body = json!({"model": self.model, "input": text});
        let (value, _) = self.transport.post("/v1/embeddings", &body)?;
        let parsed: EmbeddingBody =
            serde_json::from_value(value).map_err(|e| ClientError::Decode(e.to_string()))?;
        let item = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Decode("no embedding data".into()))?;
        unit_normalize(item.embedding)
    }
}
