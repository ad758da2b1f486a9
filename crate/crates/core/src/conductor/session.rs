use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::context::ActionRecord;
use crate::lm::UsageRecord;
use crate::model::{Document, InformationNeed, ProvenanceGraph, TargetModel, TransformationS};
use crate::retriever::RetrievalResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Answer,
    Question,
    /// Budget ran out; best-effort summary.
    Forced,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum TranscriptEntry {
    User { turn: usize, text: String },
    Action { turn: usize, record: ActionRecord },
    Reply { turn: usize, kind: ReplyKind, text: String, revision: u64 },
}

impl TranscriptEntry {
    pub fn turn(&self) -> usize {
        match self {
            Self::User { turn, .. } | Self::Action { turn, .. } | Self::Reply { turn, .. } => *turn,
        }
    }
}

/// Everything a session carries between turns. Serialized into the
/// workspace after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub workspace_id: String,
    pub datasets: Vec<String>,
    pub need: Option<InformationNeed>,
    pub model: TargetModel,
    /// Published revisions, oldest first (bounded).
    pub revisions: Vec<TargetModel>,
    pub provenance: ProvenanceGraph,
    pub transcript: Vec<TranscriptEntry>,
    pub usage: UsageRecord,
    pub document: Option<Document>,
    #[serde(default)]
    pub retrieved: Vec<RetrievalResult>,
    #[serde(default)]
    pub pending_question: Option<String>,
    #[serde(default)]
    pub carried_iterations: usize,
    #[serde(default)]
    pub turns: usize,
    /// Last transformation run by the direct-synthesis executor.
    #[serde(default)]
    pub adhoc: Option<TransformationS>,
}

impl Session {
    pub fn new(session_id: &str, workspace_id: String, datasets: Vec<String>) -> Self {
        let model = TargetModel::default();
        Self {
            session_id: session_id.to_string(),
            workspace_id,
            datasets,
            need: None,
            revisions: vec![model.clone()],
            model,
            provenance: ProvenanceGraph::new(),
            transcript: Vec::new(),
            usage: UsageRecord::default(),
            document: None,
            retrieved: Vec::new(),
            pending_question: None,
            carried_iterations: 0,
            turns: 0,
            adhoc: None,
        }
    }

    pub fn last_reply(&self) -> Option<(ReplyKind, &str)> {
        self.transcript.iter().rev().find_map(|e| match e {
            TranscriptEntry::Reply { kind, text, .. } => Some((*kind, text.as_str())),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub text: String,
    pub kind: ReplyKind,
    pub revision: u64,
    pub document_revision: Option<u64>,
    pub iterations: usize,
    #[serde(with = "secs")]
    pub elapsed: Duration,
    /// Portion of `elapsed` spent waiting on the model provider.
    #[serde(with = "secs")]
    pub llm_time: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?.max(0.0)))
    }
}
