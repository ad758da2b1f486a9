//! Provider-agnostic chat completion and embedding.
//!
//! Structured replies are JSON documents validated by the caller's type; a
//! reply that fails to parse or validate is re-prompted up to twice with the
//! validation error appended to the conversation.

mod http;
mod scripted;
mod trace;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use http::{HttpConfig, HttpProvider};
pub use scripted::{hashed_embedding, RecordingProvider, ScriptedProvider, ScriptedReply, EMBEDDING_DIM};
pub use trace::Trace;

pub const MAX_STRUCTURE_RETRIES: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("language model provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("reply does not match schema {schema} after {attempts} attempts: {message}")]
    StructureValidationFailed {
        schema: String,
        attempts: u32,
        message: String,
    },
    #[error("provider call timed out after {0:?}")]
    Timeout(Duration),
    /// A scripted reply was gated on text the prompt did not contain.
    #[error("scripted reply {index} expected the prompt to contain {expected:?}; latest user message was {got:?}")]
    ScriptMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ResponseFormat {
    FreeText,
    Structured { schema: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub response_format: ResponseFormat,
}

impl ChatRequest {
    pub fn free_text(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            response_format: ResponseFormat::FreeText,
        }
    }

    pub fn structured(system: impl Into<String>, user: impl Into<String>, schema: &str) -> Self {
        Self {
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            response_format: ResponseFormat::Structured { schema: schema.to_string() },
        }
    }

    fn check(&self) -> Result<(), LmError> {
        match self.messages.first() {
            None => Err(LmError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::System => {
                Err(LmError::InvalidRequest("first message must have role system".into()))
            }
            Some(_) => Ok(()),
        }
    }
}

/// Token and time accounting. Accumulates by `+=`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
    #[serde(default)]
    pub calls: u64,
}

impl std::ops::AddAssign for UsageRecord {
    fn add_assign(&mut self, o: Self) {
        self.input_tokens += o.input_tokens;
        self.output_tokens += o.output_tokens;
        self.wall_time += o.wall_time;
        self.calls += o.calls;
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}

/// Rough token count used when a provider reports none.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Raw provider reply to one chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReply {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

impl RawReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), input_tokens: None, output_tokens: None }
    }
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, messages: &[ChatMessage]) -> Result<RawReply, LmError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LmError>;
}

/// One completion as seen by callers.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: UsageRecord,
    pub retry_count: u32,
}

/// Shared entry point for all model calls.
#[derive(Clone)]
pub struct LmService {
    provider: Arc<dyn Provider>,
}

impl std::fmt::Debug for LmService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmService").field("provider", &self.provider.name()).finish()
    }
}

impl LmService {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self { provider }
    }

    pub fn scripted(replies: Vec<ScriptedReply>) -> Self {
        Self::new(Arc::new(ScriptedProvider::new(replies)))
    }

    /// Provider chosen by `QUARRY_LM_*` environment variables.
    pub fn from_env() -> Result<Self, LmError> {
        let kind = std::env::var("QUARRY_LM_PROVIDER").unwrap_or_else(|_| "http".into());
        match kind.as_str() {
            "http" | "openai" => Ok(Self::new(Arc::new(HttpProvider::new(HttpConfig::from_env()?)))),
            "scripted" => Ok(Self::scripted(Vec::new())),
            other => Err(LmError::ProviderUnavailable(format!("unknown provider kind {other}"))),
        }
    }

    pub fn provider(&self) -> Arc<dyn Provider> {
        self.provider.clone()
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    fn call(&self, messages: &[ChatMessage]) -> Result<(RawReply, UsageRecord), LmError> {
        let started = Instant::now();
        let reply = self.provider.chat(messages)?;
        let input = reply
            .input_tokens
            .unwrap_or_else(|| messages.iter().map(|m| estimate_tokens(&m.content)).sum());
        let usage = UsageRecord {
            input_tokens: input,
            output_tokens: reply.output_tokens.unwrap_or_else(|| estimate_tokens(&reply.text)),
            wall_time: started.elapsed(),
            calls: 1,
        };
        Ok((reply, usage))
    }

    /// Free-text completion. Structured requests should go through
    /// [`LmService::complete_structured`]; here their reply is returned
    /// unvalidated.
    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, LmError> {
        req.check()?;
        let (reply, usage) = self.call(&req.messages)?;
        Ok(Completion { text: reply.text, usage, retry_count: 0 })
    }

    /// Structured completion parsed as `T` and checked by `validate`.
    pub fn complete_structured<T: DeserializeOwned>(
        &self,
        req: &ChatRequest,
        validate: impl Fn(&T) -> Result<(), String>,
    ) -> Result<(T, Completion), LmError> {
        req.check()?;
        let schema = match &req.response_format {
            ResponseFormat::Structured { schema } => schema.clone(),
            ResponseFormat::FreeText => "json".to_string(),
        };
        let mut messages = req.messages.clone();
        let mut total = UsageRecord::default();
        let mut last_error = String::new();
        for attempt in 0..=MAX_STRUCTURE_RETRIES {
            let (reply, usage) = self.call(&messages)?;
            total += usage;
            let parsed = serde_json::from_str::<T>(strip_fences(&reply.text))
                .map_err(|e| format!("not valid {schema} JSON: {e}"))
                .and_then(|v| validate(&v).map(|()| v));
            match parsed {
                Ok(v) => {
                    return Ok((v, Completion { text: reply.text, usage: total, retry_count: attempt }));
                }
                Err(e) => {
                    warn!(schema = %schema, attempt, error = %e, "structured reply rejected");
                    last_error = e.clone();
                    messages.push(ChatMessage::assistant(reply.text));
                    messages.push(ChatMessage::user(format!(
                        "Your previous reply was rejected: {e}\nReply again with a single JSON document matching the {schema} schema and nothing else."
                    )));
                }
            }
        }
        Err(LmError::StructureValidationFailed {
            schema,
            attempts: MAX_STRUCTURE_RETRIES + 1,
            message: last_error,
        })
    }

    pub fn embed(&self, texts: &[String]) -> Result<(Vec<EmbeddingVector>, UsageRecord), LmError> {
        if texts.is_empty() {
            return Err(LmError::InvalidRequest("nothing to embed".into()));
        }
        let started = Instant::now();
        let vectors = self.provider.embed(texts)?;
        if vectors.len() != texts.len() {
            return Err(LmError::ProviderUnavailable(format!(
                "provider returned {} embeddings for {} inputs",
                vectors.len(),
                texts.len()
            )));
        }
        let usage = UsageRecord {
            input_tokens: texts.iter().map(|t| estimate_tokens(t)).sum(),
            output_tokens: 0,
            wall_time: started.elapsed(),
            calls: 1,
        };
        Ok((vectors, usage))
    }
}

/// Strip a surrounding Markdown code fence, if any.
pub fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}
