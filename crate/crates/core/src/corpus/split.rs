use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dialogue;
use crate::error::{Error, Result};
use crate::seed;

/// Dialogue-level k-fold partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub membership: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Ids held out in `fold`, sorted.
    pub fn held_out(&self, fold: usize) -> BTreeSet<&str> {
        self.membership
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn in_training(&self, fold: usize, dialogue_id: &str) -> bool {
        self.membership
            .get(dialogue_id)
            .is_some_and(|&f| f != fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.membership.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

pub fn split_folds(dialogues: &[Dialogue], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config(format!("fold count must be at least 2, got {k}")));
    }
    if dialogues.len() < k {
        return Err(Error::precondition(format!(
            "{} dialogues cannot fill {k} folds",
            dialogues.len()
        )));
    }
    let mut ids: Vec<&str> = dialogues.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    let unique = ids.len();
    ids.dedup();
    if ids.len() != unique {
        return Err(Error::invalid("duplicate dialogue ids"));
    }
    ids.shuffle(&mut seed::rng(seed, "split_folds", k as u64));
    let membership = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment { k, membership })
}

/// Move whole dialogues into a dev set until it holds at least `n_dev_turns`
/// user turns. Returned halves keep the input order.
pub fn split_train_dev(
    dialogues: &[Dialogue],
    n_dev_turns: usize,
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>)> {
    let total: usize = dialogues.iter().map(|d| d.turns.len()).sum();
    if n_dev_turns >= total && !(n_dev_turns == 0 && total == 0) {
        return Err(Error::precondition(format!(
            "dev size {n_dev_turns} must be below the {total} available turns"
        )));
    }
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.sort_by(|&a, &b| dialogues[a].id.cmp(&dialogues[b].id));
    order.shuffle(&mut seed::rng(seed, "split_train_dev", n_dev_turns as u64));

    let mut dev_idx = BTreeSet::new();
    let mut dev_turns = 0;
    for i in order {
        if dev_turns >= n_dev_turns {
            break;
        }
        dev_idx.insert(i);
        dev_turns += dialogues[i].turns.len();
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, d) in dialogues.iter().enumerate() {
        if dev_idx.contains(&i) {
            dev.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, dev))
}
