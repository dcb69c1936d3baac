//! Dialogue data model, synthetic corpus generation, context assembly,
//! tokenization and dataset splitting.

mod context;
mod io;
mod split;
mod synth;
mod tokenizer;

pub use context::{
    assemble_context, ground_truth_transcripts, truncate_context, DEFAULT_MAX_CONTEXT_TOKENS,
};
pub use io::{read_dialogues_jsonl, write_dialogues_jsonl};
pub use split::{split_folds, split_train_dev, FoldAssignment};
pub use synth::{generate_synthetic_dialogues, GenerationConfig, SlotCategory, Vocabulary};
pub use tokenizer::{SpecialToken, Vocab};

use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

/// One user utterance and the agent response that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based position in the dialogue.
    pub index: usize,
    pub user_text: String,
    /// May be empty on the final turn.
    pub agent_text: String,
    /// Name of the feature file holding this turn's speech, if persisted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speech_ref: Option<String>,
    #[serde(skip)]
    pub speech: Option<FeatureSequence>,
}

impl Turn {
    pub fn new(index: usize, user_text: impl Into<String>, agent_text: impl Into<String>) -> Self {
        Turn {
            index,
            user_text: user_text.into(),
            agent_text: agent_text.into(),
            speech_ref: None,
            speech: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks the structural invariants: contiguous 1-based indices and
    /// non-empty normalized user text.
    pub fn validate(&self) -> crate::Result<()> {
        for (pos, turn) in self.turns.iter().enumerate() {
            if turn.index != pos + 1 {
                return Err(crate::Error::invalid(format!(
                    "dialogue {}: turn at position {} has index {}",
                    self.id,
                    pos + 1,
                    turn.index
                )));
            }
            if crate::textnorm::normalize(&turn.user_text).is_empty() {
                return Err(crate::Error::invalid(format!(
                    "dialogue {} turn {}: empty user text",
                    self.id, turn.index
                )));
            }
        }
        Ok(())
    }

    pub fn turn(&self, index: usize) -> Option<&Turn> {
        index.checked_sub(1).and_then(|i| self.turns.get(i))
    }
}

/// Accumulated dialogue history preceding a turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    /// Alternating `(user, agent)` entries, oldest first.
    pub entries: Vec<(Role, String)>,
    /// Token ids after tokenization and truncation; empty until encoded.
    #[serde(default)]
    pub token_ids: Vec<u32>,
}

impl ContextWindow {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Texts of the user entries in order.
    pub fn user_texts(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(r, _)| *r == Role::User)
            .map(|(_, t)| t.as_str())
    }

    pub fn encode(mut self, vocab: &Vocab, max_tokens: usize) -> Self {
        self.token_ids = vocab.encode_context(&self.entries, max_tokens);
        self
    }

    /// Same number of entries with the same roles, in the same order.
    pub fn same_structure(&self, other: &ContextWindow) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.0 == b.0)
    }
}
