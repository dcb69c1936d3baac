use std::collections::BTreeMap;

use super::{ContextWindow, Dialogue, Role};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 1024;

/// History before `turn_index`: `(p_1, r_1, ..., p_{t-1}, r_{t-1})` where
/// `p_k` comes from `user_transcripts` (ground truth while training, model
/// output at inference) and `r_k` is the agent response.
pub fn assemble_context(
    dialogue: &Dialogue,
    turn_index: usize,
    user_transcripts: &BTreeMap<usize, String>,
) -> Result<ContextWindow> {
    if turn_index == 0 || turn_index > dialogue.turns.len() {
        return Err(Error::precondition(format!(
            "turn index {turn_index} outside 1..={} for dialogue {}",
            dialogue.turns.len(),
            dialogue.id
        )));
    }
    let mut entries = Vec::with_capacity(2 * (turn_index - 1));
    for turn in &dialogue.turns[..turn_index - 1] {
        let transcript = user_transcripts.get(&turn.index).ok_or_else(|| {
            Error::precondition(format!(
                "dialogue {}: no user transcript for turn {} (needed by turn {turn_index})",
                dialogue.id, turn.index
            ))
        })?;
        entries.push((Role::User, transcript.clone()));
        entries.push((Role::Agent, turn.agent_text.clone()));
    }
    Ok(ContextWindow {
        entries,
        token_ids: Vec::new(),
    })
}

/// Ground-truth transcripts of every turn, for training-time contexts.
pub fn ground_truth_transcripts(dialogue: &Dialogue) -> BTreeMap<usize, String> {
    dialogue
        .turns
        .iter()
        .map(|t| (t.index, t.user_text.clone()))
        .collect()
}

/// Keep only the last `max_tokens` ids.
pub fn truncate_context(token_ids: &[u32], max_tokens: usize) -> Vec<u32> {
    let start = token_ids.len().saturating_sub(max_tokens);
    token_ids[start..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use proptest::prelude::*;

    fn dialogue() -> Dialogue {
        Dialogue {
            id: "d".into(),
            turns: vec![
                Turn::new(1, "a", "x"),
                Turn::new(2, "b", "y"),
                Turn::new(3, "c", ""),
            ],
        }
    }

    #[test]
    fn first_turn_has_empty_context() {
        let w = assemble_context(&dialogue(), 1, &BTreeMap::new()).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn entries_alternate_in_order() {
        let d = dialogue();
        let w = assemble_context(&d, 3, &ground_truth_transcripts(&d)).unwrap();
        let expect = vec![
            (Role::User, "a".to_string()),
            (Role::Agent, "x".to_string()),
            (Role::User, "b".to_string()),
            (Role::Agent, "y".to_string()),
        ];
        assert_eq!(w.entries, expect);
    }

    #[test]
    fn predicted_transcripts_are_used_verbatim() {
        let d = dialogue();
        let mut t = BTreeMap::new();
        t.insert(1, "zz".to_string());
        let w = assemble_context(&d, 2, &t).unwrap();
        assert_eq!(w.entries[0], (Role::User, "zz".to_string()));
    }

    #[test]
    fn missing_transcript_is_an_error() {
        let d = dialogue();
        let mut t = BTreeMap::new();
        t.insert(1, "a".to_string());
        assert!(matches!(
            assemble_context(&d, 3, &t),
            Err(Error::Precondition(_))
        ));
        assert!(assemble_context(&d, 0, &t).is_err());
        assert!(assemble_context(&d, 4, &t).is_err());
    }

    #[test]
    fn truncation_examples() {
        let ids: Vec<u32> = (0..1500).collect();
        assert_eq!(truncate_context(&ids[..100], 1024), ids[..100].to_vec());
        assert_eq!(truncate_context(&ids, 1024), ids[476..].to_vec());
        assert_eq!(truncate_context(&ids[..1024], 1024), ids[..1024].to_vec());
    }

    proptest! {
        #[test]
        fn truncation_is_idempotent(len in 0usize..300, max in 0usize..200) {
            let ids: Vec<u32> = (0..len as u32).collect();
            let once = truncate_context(&ids, max);
            prop_assert!(once.len() <= max);
            prop_assert_eq!(truncate_context(&once, max), once.clone());
            prop_assert_eq!(&ids[ids.len() - once.len()..], &once[..]);
        }

        #[test]
        fn context_has_two_entries_per_prior_turn(t in 1usize..=3) {
            let d = dialogue();
            let w = assemble_context(&d, t, &ground_truth_transcripts(&d)).unwrap();
            prop_assert_eq!(w.entries.len(), 2 * (t - 1));
        }
    }
}
