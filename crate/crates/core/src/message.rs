//! Messages, labeled queries, and token counting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// What a trace record represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    /// Same-round delivery along a spatial edge.
    Spatial,
    /// Prior-round output delivered along temporal edges.
    Temporal,
    /// The query fan-out to every agent at the start of a round.
    Query,
    /// The aggregated round answer.
    Answer,
}

/// One agent utterance (or query/answer record) in the dialogue trace.
///
/// `sender` is `None` for records originating outside the agent set (the
/// query itself and aggregated answers).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub sender: Option<usize>,
    pub recipients: BTreeSet<usize>,
    pub kind: MessageKind,
    pub content: String,
    pub token_count: u64,
}

impl Message {
    /// The answer an agent committed to: its first line, trimmed and
    /// upper-cased. Replies carry the chosen label on the first line.
    pub fn answer_line(&self) -> String {
        normalize_answer(&self.content)
    }
}

pub fn normalize_answer(content: &str) -> String {
    content.lines().next().unwrap_or("").trim().to_uppercase()
}

/// A labeled query: free text, an optional ground-truth label, and the
/// label set for multiple-choice tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub choices: Vec<String>,
}

impl QueryRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: None,
            choices: Vec::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>, choices: Vec<String>) -> Self {
        self.label = Some(label.into());
        self.choices = choices;
        self
    }
}

/// Pluggable token counter. The default is whitespace-delimited counting;
/// byte-pair schemes can slot in behind the same trait. No parity with any
/// provider tokenizer is claimed.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Counts whitespace-delimited tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}
