use std::collections::VecDeque;
use std::hash::Hasher;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{ChatMessage, EmbeddingVector, LmError, Provider, RawReply, Role};

pub const EMBEDDING_DIM: usize = 256;
const SCRIPTED_MODEL: &str = "scripted-hash-256";

/// One queued reply. `reply` is sent verbatim when it is a JSON string and
/// serialized compactly otherwise, so traces can hold structured replies as
/// plain JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<String>,
    pub reply: serde_json::Value,
}

impl ScriptedReply {
    pub fn text(t: impl Into<String>) -> Self {
        Self { expect: None, reply: serde_json::Value::String(t.into()) }
    }

    pub fn json(v: serde_json::Value) -> Self {
        Self { expect: None, reply: v }
    }

    pub fn expecting(mut self, needle: impl Into<String>) -> Self {
        self.expect = Some(needle.into());
        self
    }

    pub fn rendered(&self) -> String {
        match &self.reply {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

/// Deterministic offline provider: replies come from a FIFO queue,
/// embeddings from feature hashing.
pub struct ScriptedProvider {
    queue: Mutex<(usize, VecDeque<ScriptedReply>)>,
    delay: Duration,
}

impl ScriptedProvider {
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        Self { queue: Mutex::new((0, replies.into())), delay: Duration::ZERO }
    }

    /// Sleep this long in every chat call (for in-flight tests).
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script queue poisoned").1.len()
    }
}

impl Provider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<RawReply, LmError> {
        // hold the lock across the delay so concurrent callers stay FIFO
        let mut q = self.queue.lock().expect("script queue poisoned");
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let latest_user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let index = q.0;
        let Some(next) = q.1.pop_front() else {
            return Err(LmError::ProviderUnavailable(format!(
                "scripted reply queue exhausted after {index} replies"
            )));
        };
        q.0 += 1;
        if let Some(expected) = &next.expect {
            if !latest_user.contains(expected.as_str()) {
                let got: String = latest_user.chars().take(400).collect();
                return Err(LmError::ScriptMismatch { index, expected: expected.clone(), got });
            }
        }
        Ok(RawReply::text(next.rendered()))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LmError> {
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector { values: hashed_embedding(t), model_id: SCRIPTED_MODEL.into() })
            .collect())
    }
}

fn bucket(feature: &str, salt: u8) -> (usize, f64) {
    let mut h = FnvHasher::default();
    h.write_u8(salt);
    h.write(feature.as_bytes());
    let v = h.finish();
    let idx = (v % EMBEDDING_DIM as u64) as usize;
    let sign = if (v >> 63) & 1 == 0 { 1.0 } else { -1.0 };
    (idx, sign)
}

/// Feature-hashed pseudo-embedding: lowercase word tokens (weight 1) and
/// character trigrams (weight 0.5) hashed into signed buckets, L2-normalized.
pub fn hashed_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    let lower = text.to_lowercase();
    for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let (i, s) = bucket(word, 0);
        v[i] += s;
    }
    let chars: Vec<char> = lower.chars().collect();
    for w in chars.windows(3) {
        let g: String = w.iter().collect();
        let (i, s) = bucket(&g, 1);
        v[i] += 0.5 * s;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Wraps a provider and keeps every chat reply, so a live session can be
/// written out as a trace and replayed offline.
pub struct RecordingProvider {
    inner: Arc<dyn Provider>,
    recorded: Mutex<Vec<ScriptedReply>>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn Provider>) -> Self {
        Self { inner, recorded: Mutex::new(Vec::new()) }
    }

    pub fn recorded(&self) -> Vec<ScriptedReply> {
        self.recorded.lock().expect("recording poisoned").clone()
    }
}

impl Provider for RecordingProvider {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<RawReply, LmError> {
        let reply = self.inner.chat(messages)?;
        let value = serde_json::from_str::<serde_json::Value>(super::strip_fences(&reply.text))
            .ok()
            .filter(|v| v.is_object() || v.is_array())
            .unwrap_or_else(|| serde_json::Value::String(reply.text.clone()));
        self.recorded.lock().expect("recording poisoned").push(ScriptedReply { expect: None, reply: value });
        Ok(reply)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LmError> {
        self.inner.embed(texts)
    }
}
