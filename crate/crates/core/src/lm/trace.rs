use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScriptedReply;
use crate::model::Document;

/// A replayable session: the user messages, the model replies in call order,
/// and optionally the Document the session produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// User messages, one per turn.
    #[serde(default)]
    pub messages: Vec<String>,
    pub replies: Vec<ScriptedReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<Document>,
    /// Answer with no target model (ablation).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub direct_synthesis: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disable_context_extract: bool,
    /// Simulated provider latency per reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_delay_ms: Option<u64>,
}

impl Trace {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// A scripted model service that plays back this trace's replies.
    pub fn provider(&self) -> super::LmService {
        let mut p = super::ScriptedProvider::new(self.replies.clone());
        if let Some(ms) = self.reply_delay_ms {
            p = p.with_delay(std::time::Duration::from_millis(ms));
        }
        super::LmService::new(std::sync::Arc::new(p))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("trace serializes");
        std::fs::write(path, text + "\n")
    }
}
