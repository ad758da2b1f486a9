//! Literal keywords a question expects to find verbatim in table cells.

use serde::Deserialize;

use crate::lm::{ChatRequest, LmService, UsageRecord};

pub const MAX_ENTITIES: usize = 8;
const METACHARS: &[char] = &['.', '^', '$', '*', '+', '?', '(', ')', '[', ']', '{', '}', '|', '\\'];

const SYSTEM: &str = "You extract search keywords from a data question. Return the literal strings \
(names, places, codes, categories, years) that are likely to appear verbatim in table cells. \
Reply with JSON: {\"entities\": [\"...\"]} and at most 8 entries. Return an empty list when there are none.";

// Sentence starters and function words that are capitalized without naming
// anything.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "by", "can", "could", "did", "do", "does", "find", "for", "from", "give",
    "how", "i", "if", "in", "is", "it", "list", "me", "of", "on", "or", "please", "show", "tell", "the", "to",
    "was", "we", "were", "what", "when", "where", "which", "who", "why", "with", "would",
];

#[derive(Deserialize)]
#[serde(untagged)]
enum EntityReply {
    Wrapped { entities: Vec<String> },
    Bare(Vec<String>),
}

impl EntityReply {
    fn into_list(self) -> Vec<String> {
        match self {
            EntityReply::Wrapped { entities } | EntityReply::Bare(entities) => entities,
        }
    }
}

/// Remove regex metacharacters, trim, drop empties and duplicates, cap.
pub fn sanitize(raw: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in raw {
        let cleaned: String = r.chars().filter(|c| !METACHARS.contains(c)).collect();
        let cleaned = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
        if cleaned.is_empty() || out.iter().any(|o| o.eq_ignore_ascii_case(&cleaned)) {
            continue;
        }
        out.push(cleaned);
        if out.len() == MAX_ENTITIES {
            break;
        }
    }
    out
}

/// Quoted spans, then runs of capitalized words outside them.
pub fn heuristic_entities(text: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut outside = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let close = match c {
            '"' => '"',
            '\u{201c}' => '\u{201d}',
            _ => {
                outside.push(c);
                continue;
            }
        };
        let mut span = String::new();
        let mut closed = false;
        for d in chars.by_ref() {
            if d == close {
                closed = true;
                break;
            }
            span.push(d);
        }
        if closed {
            found.push(span);
            outside.push(' ');
        } else {
            outside.push_str(&span);
        }
    }

    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, found: &mut Vec<String>| {
        if !run.is_empty() {
            found.push(run.join(" "));
            run.clear();
        }
    };
    for word in outside.split_whitespace() {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric());
        let capitalized = w.chars().next().is_some_and(char::is_uppercase);
        if capitalized && !STOPWORDS.contains(&w.to_lowercase().as_str()) {
            run.push(w);
            // punctuation after a word ends the name
            if word.ends_with([',', '.', '?', '!', ';', ':']) {
                flush(&mut run, &mut found);
            }
        } else {
            flush(&mut run, &mut found);
        }
    }
    flush(&mut run, &mut found);
    sanitize(found)
}

/// Ask the model for entities; fall back to heuristics on any failure.
pub fn extract_entities(lm: &LmService, question: &str) -> (Vec<String>, UsageRecord) {
    let req = ChatRequest::structured(SYSTEM, format!("Question: {question}"), "entities");
    match lm.complete_structured::<EntityReply>(&req, |_| Ok(())) {
        Ok((reply, c)) => (sanitize(reply.into_list()), c.usage),
        Err(e) => {
            tracing::warn!(error = %e, "entity extraction failed; using heuristics");
            (heuristic_entities(question), UsageRecord::default())
        }
    }
}
