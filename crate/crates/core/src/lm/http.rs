//! OpenAI-compatible HTTP provider.

use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatMessage, EmbeddingVector, LmError, Provider, RawReply};

const COMPLETION_TIMEOUT: Duration = Duration::from_secs(120);
const EMBEDDING_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
}

impl HttpConfig {
    pub fn from_env() -> Result<Self, LmError> {
        let endpoint = std::env::var("QUARRY_LM_ENDPOINT")
            .map_err(|_| LmError::ProviderUnavailable("QUARRY_LM_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key: std::env::var("QUARRY_LM_API_KEY").ok(),
            chat_model: std::env::var("QUARRY_LM_CHAT_MODEL").unwrap_or_else(|_| "gpt-4o".into()),
            embed_model: std::env::var("QUARRY_LM_EMBED_MODEL").unwrap_or_else(|_| "text-embedding-3-small".into()),
        })
    }
}

pub struct HttpProvider {
    cfg: HttpConfig,
    // built on first use: the blocking client must not be created on an
    // async runtime thread
    client: OnceLock<reqwest::blocking::Client>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Msg,
}

#[derive(Deserialize)]
struct Msg {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpProvider {
    pub fn new(cfg: HttpConfig) -> Self {
        Self { cfg, client: OnceLock::new() }
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(reqwest::blocking::Client::new)
    }

    fn post(&self, path: &str, body: serde_json::Value, timeout: Duration) -> Result<reqwest::blocking::Response, LmError> {
        let mut req = self.client().post(format!("{}/{path}", self.cfg.endpoint)).timeout(timeout).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                LmError::Timeout(timeout)
            } else {
                LmError::ProviderUnavailable(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            let status = resp.status();
            let text = resp.text().unwrap_or_default();
            return Err(LmError::ProviderUnavailable(format!("{status}: {}", text.chars().take(500).collect::<String>())));
        }
        Ok(resp)
    }
}

impl Provider for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<RawReply, LmError> {
        let body = json!({ "model": self.cfg.chat_model, "messages": messages });
        let resp: ChatResponse = self
            .post("chat/completions", body, COMPLETION_TIMEOUT)?
            .json()
            .map_err(|e| LmError::ProviderUnavailable(format!("malformed completion response: {e}")))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LmError::ProviderUnavailable("completion response has no content".into()))?;
        Ok(RawReply {
            text,
            input_tokens: resp.usage.as_ref().map(|u| u.prompt_tokens),
            output_tokens: resp.usage.as_ref().map(|u| u.completion_tokens),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LmError> {
        let body = json!({ "model": self.cfg.embed_model, "input": texts });
        let mut resp: EmbedResponse = self
            .post("embeddings", body, EMBEDDING_TIMEOUT)?
            .json()
            .map_err(|e| LmError::ProviderUnavailable(format!("malformed embedding response: {e}")))?;
        resp.data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
        Ok(resp
            .data
            .into_iter()
            .map(|d| EmbeddingVector { values: d.embedding, model_id: self.cfg.embed_model.clone() })
            .collect())
    }
}
