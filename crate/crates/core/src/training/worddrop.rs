use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NoisyContextPair;
use crate::corpus::{ContextWindow, Role, Vocab};
use crate::seed;
use crate::textnorm::{normalize, wer_counts};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WordDropConfig {
    /// Deletion probability of each surviving user word per round.
    pub per_word_p: f64,
    /// Context WER to match.
    pub target_wer: f64,
    pub max_rounds: usize,
    /// Round cap when perturbing a single error-free entry (S4).
    pub entry_max_rounds: usize,
}

impl Default for WordDropConfig {
    fn default() -> Self {
        WordDropConfig {
            per_word_p: 0.10,
            target_wer: 0.065,
            max_rounds: 20,
            entry_max_rounds: 200,
        }
    }
}

impl WordDropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_word_p) {
            return Err(Error::config("word_drop.per_word_p must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.target_wer) {
            return Err(Error::config("word_drop.target_wer must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordDropOutcome {
    pub context: ContextWindow,
    pub achieved_wer: f64,
    pub rounds: usize,
    pub deletions: usize,
}

/// Delete user words in rounds; in each round every surviving word is
/// removed with probability `per_word_p`, visiting word positions in a
/// fresh random order. Stops once the deletion count whose WER lies
/// nearest `target_wer` is reached, or after `max_rounds` rounds. The last word of an utterance
/// is never removed and agent entries are left untouched. Token ids of the
/// result are cleared.
pub fn word_drop<R: Rng>(clean: &ContextWindow, cfg: &WordDropConfig, rng: &mut R) -> Result<WordDropOutcome> {
    cfg.validate()?;
    let words: Vec<Option<Vec<String>>> = clean
        .entries
        .iter()
        .map(|(role, text)| {
            (*role == Role::User).then(|| normalize(text).split_whitespace().map(str::to_string).collect())
        })
        .collect();
    let total: usize = words.iter().flatten().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid("word_drop needs at least one user word"));
    }
    let mut alive: Vec<Vec<bool>> = words
        .iter()
        .map(|w| vec![true; w.as_ref().map_or(0, Vec::len)])
        .collect();
    let mut deletions = 0usize;
    let mut rounds = 0usize;
    // Deletion count whose WER lies nearest the target, at least one for a
    // positive target.
    let goal = if cfg.target_wer > 0.0 {
        ((cfg.target_wer * total as f64).round() as usize).max(1)
    } else {
        0
    };
    let reached = |d: usize| d >= goal;
    let mut order: Vec<(usize, usize)> = alive
        .iter()
        .enumerate()
        .flat_map(|(e, w)| (0..w.len()).map(move |i| (e, i)))
        .collect();
    'rounds: while !reached(deletions) && rounds < cfg.max_rounds {
        rounds += 1;
        order.shuffle(rng);
        for &(e, i) in &order {
            let entry = &mut alive[e];
            if !entry[i] {
                continue;
            }
            let hit = rng.random_bool(cfg.per_word_p);
            if hit && entry.iter().filter(|&&a| a).count() > 1 {
                entry[i] = false;
                deletions += 1;
                if reached(deletions) {
                    break 'rounds;
                }
            }
        }
    }
    let entries = clean
        .entries
        .iter()
        .zip(&words)
        .zip(&alive)
        .map(|(((role, text), w), keep)| match w {
            Some(w) if keep.iter().any(|k| !k) => (
                *role,
                w.iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(s, _)| s.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            _ => (*role, text.clone()),
        })
        .collect();
    Ok(WordDropOutcome {
        context: ContextWindow {
            entries,
            token_ids: Vec::new(),
        },
        achieved_wer: deletions as f64 / total as f64,
        rounds,
        deletions,
    })
}

/// CNRL training-data recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CnrlVariant {
    /// Word drop on the ground-truth user history of each dialogue.
    S1,
    /// Recognition noise only in the last user entry.
    S2,
    /// Recognition noise in every user entry.
    S3,
    /// S3 plus word drop on every error-free user entry.
    S4,
}

impl FromStr for CnrlVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(CnrlVariant::S1),
            "S2" => Ok(CnrlVariant::S2),
            "S3" => Ok(CnrlVariant::S3),
            "S4" => Ok(CnrlVariant::S4),
            _ => Err(Error::config(format!("unknown CNRL variant {s:?} (expected S1..S4)"))),
        }
    }
}

impl std::fmt::Display for CnrlVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Build a CNRL training set from generated pairs. Every output pair has the
/// same entry structure as its clean context and carries token ids.
pub fn build_cnrl_set(
    pairs: &[NoisyContextPair],
    variant: CnrlVariant,
    cfg: &WordDropConfig,
    seed: u64,
    vocab: &Vocab,
    max_tokens: usize,
) -> Result<Vec<NoisyContextPair>> {
    cfg.validate()?;
    let s1 = if variant == CnrlVariant::S1 { dialogue_word_drop(pairs, cfg, seed)? } else { BTreeMap::new() };
    pairs
        .iter()
        .map(|p| {
            let noisy = match variant {
                CnrlVariant::S1 => {
                    let corrupted = &s1[p.dialogue_id.as_str()];
                    let mut ctx = p.clean_context.clone();
                    for (i, (role, text)) in ctx.entries.iter_mut().enumerate() {
                        if *role == Role::User {
                            *text = corrupted[i].1.clone();
                        }
                    }
                    ctx
                }
                CnrlVariant::S2 => {
                    let last_user = p.clean_context.entries.iter().rposition(|(r, _)| *r == Role::User);
                    let mut ctx = p.clean_context.clone();
                    if let Some(i) = last_user {
                        ctx.entries[i] = p.noisy_context.entries[i].clone();
                    }
                    ctx
                }
                CnrlVariant::S3 => p.noisy_context.clone(),
                CnrlVariant::S4 => {
                    let mut ctx = p.noisy_context.clone();
                    let entry_cfg = WordDropConfig {
                        max_rounds: cfg.entry_max_rounds,
                        ..*cfg
                    };
                    for (i, ((role, clean), (_, noisy))) in
                        p.clean_context.entries.iter().zip(&p.noisy_context.entries).enumerate()
                    {
                        if *role != Role::User || wer_counts(clean, noisy).errors() > 0 {
                            continue;
                        }
                        // Same utterance, same corruption in every later context.
                        let entry_key = format!("{}/{i}", p.dialogue_id);
                        let mut rng = seed::rng(seed, "s4_word_drop", seed::string_id(&entry_key));
                        let single = ContextWindow {
                            entries: vec![(Role::User, noisy.clone())],
                            token_ids: Vec::new(),
                        };
                        ctx.entries[i] = word_drop(&single, &entry_cfg, &mut rng)?.context.entries.remove(0);
                    }
                    ctx
                }
            };
            Ok(NoisyContextPair::new(
                p.dialogue_id.clone(),
                p.turn_index,
                ContextWindow {
                    entries: noisy.entries,
                    token_ids: Vec::new(),
                },
                p.clean_context.clone(),
            )?
            .encode(vocab, max_tokens))
        })
        .collect()
}

/// Word drop over the whole user history of each dialogue, taken from its
/// longest clean context. Every context of the dialogue shares the result,
/// so an utterance reads the same in each later turn.
fn dialogue_word_drop<'a>(
    pairs: &'a [NoisyContextPair],
    cfg: &WordDropConfig,
    seed: u64,
) -> Result<BTreeMap<&'a str, Vec<(Role, String)>>> {
    let mut longest: BTreeMap<&str, &ContextWindow> = BTreeMap::new();
    for p in pairs {
        let e = longest.entry(p.dialogue_id.as_str()).or_insert(&p.clean_context);
        if p.clean_context.entries.len() > e.entries.len() {
            *e = &p.clean_context;
        }
    }
    longest
        .into_iter()
        .map(|(id, clean)| {
            let mut rng = seed::rng(seed, "s1_word_drop", seed::string_id(id));
            Ok((id, word_drop(clean, cfg, &mut rng)?.context.entries))
        })
        .collect()
}
