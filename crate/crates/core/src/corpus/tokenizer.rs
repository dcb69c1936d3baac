use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{truncate_context, Dialogue, Role};
use crate::error::{Error, Result};
use crate::textnorm::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum SpecialToken {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    Unk = 3,
    RoleUser = 4,
    RoleAgent = 5,
    Mask = 6,
}

const SPECIAL_NAMES: [&str; 7] = ["<pad>", "<s>", "</s>", "<unk>", "<user>", "<agent>", "<mask>"];

impl SpecialToken {
    pub const COUNT: u32 = 7;

    pub fn id(self) -> u32 {
        self as u32
    }
}

/// Closed word-level vocabulary over normalized text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut v = Vocab {
            words,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| {
                normalize(w.as_ref())
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .collect();
        Vocab::from(set.into_iter().collect::<Vec<_>>())
    }

    /// Every word in user and agent text of the given dialogues.
    pub fn from_dialogues<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>) -> Self {
        let mut texts = Vec::new();
        for d in dialogues {
            for t in &d.turns {
                texts.push(t.user_text.clone());
                texts.push(t.agent_text.clone());
            }
        }
        Self::from_words(texts)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + SpecialToken::COUNT))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len() + SpecialToken::COUNT as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.index
            .get(word)
            .copied()
            .unwrap_or(SpecialToken::Unk.id())
    }

    pub fn token(&self, id: u32) -> &str {
        if id < SpecialToken::COUNT {
            SPECIAL_NAMES[id as usize]
        } else {
            self.words
                .get((id - SpecialToken::COUNT) as usize)
                .map(String::as_str)
                .unwrap_or(SPECIAL_NAMES[SpecialToken::Unk as usize])
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .split_whitespace()
            .map(|w| self.word_id(w))
            .collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize) for in-vocabulary text.
    /// Padding, BOS and EOS are dropped; other specials render by name.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| {
                id != SpecialToken::Pad.id()
                    && id != SpecialToken::Bos.id()
                    && id != SpecialToken::Eos.id()
            })
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Context token stream: a role marker before each entry's words, then
    /// the last `max_tokens` kept. An empty history encodes as `[BOS]`.
    pub fn encode_context(&self, entries: &[(Role, String)], max_tokens: usize) -> Vec<u32> {
        let mut ids = Vec::new();
        for (role, text) in entries {
            ids.push(match role {
                Role::User => SpecialToken::RoleUser.id(),
                Role::Agent => SpecialToken::RoleAgent.id(),
            });
            ids.extend(self.tokenize(text));
        }
        if ids.is_empty() {
            return vec![SpecialToken::Bos.id()];
        }
        truncate_context(&ids, max_tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.words)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::from_words(["book a table", "for two people", "Thank you!"])
    }

    #[test]
    fn empty_text_roundtrips() {
        let v = vocab();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&[]), "");
    }

    #[test]
    fn in_vocabulary_roundtrip() {
        let v = vocab();
        let ids = v.tokenize("book a table");
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i >= SpecialToken::COUNT));
        assert_eq!(v.detokenize(&ids), "book a table");
        assert_eq!(v.detokenize(&v.tokenize("Table for 2")), "table for two");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        let ids = v.tokenize("book a zeppelin");
        assert_eq!(ids[2], SpecialToken::Unk.id());
    }

    #[test]
    fn context_encoding_marks_roles() {
        let v = vocab();
        let entries = vec![
            (Role::User, "book a table".to_string()),
            (Role::Agent, "for two".to_string()),
        ];
        let ids = v.encode_context(&entries, 1024);
        assert_eq!(ids[0], SpecialToken::RoleUser.id());
        assert_eq!(ids[4], SpecialToken::RoleAgent.id());
        assert_eq!(ids.len(), 7);
        assert_eq!(v.encode_context(&[], 1024), vec![SpecialToken::Bos.id()]);
        assert_eq!(v.encode_context(&entries, 3), ids[4..].to_vec());
    }

    #[test]
    fn save_load_preserves_ids() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let w = Vocab::load(&p).unwrap();
        assert_eq!(w.tokenize("thank you people"), v.tokenize("thank you people"));
    }

    proptest! {
        #[test]
        fn roundtrip_on_vocabulary_strings(idx in proptest::collection::vec(0usize..8, 0..12)) {
            let v = vocab();
            let text = idx.iter().map(|&i| v.words()[i].as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.detokenize(&v.tokenize(&text)), normalize(&text));
        }
    }
}
