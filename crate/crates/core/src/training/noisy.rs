use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_context, ground_truth_transcripts, ContextWindow, Dialogue, FoldAssignment, Role, Vocab};
use crate::eval::{transcribe_dialogues, utterance_id, ContextMode};
use crate::model::CaAsr;
use crate::textnorm::{wer_counts, WerCounts};
use crate::{Error, Result};

/// A context built from recognizer output (or corrupted text) next to the
/// ground-truth context of the same turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyContextPair {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub noisy_context: ContextWindow,
    pub clean_context: ContextWindow,
    /// Pooled WER of the noisy user entries against the clean ones.
    pub measured_wer: f64,
}

/// Pooled edit counts of the user entries of `noisy` against `clean`.
pub fn context_user_counts(clean: &ContextWindow, noisy: &ContextWindow) -> Result<WerCounts> {
    if !clean.same_structure(noisy) {
        return Err(Error::invalid("noisy and clean contexts differ in structure"));
    }
    Ok(clean
        .entries
        .iter()
        .zip(&noisy.entries)
        .filter(|(c, _)| c.0 == Role::User)
        .map(|(c, n)| wer_counts(&c.1, &n.1))
        .sum())
}

impl NoisyContextPair {
    pub fn new(
        dialogue_id: impl Into<String>,
        turn_index: usize,
        noisy_context: ContextWindow,
        clean_context: ContextWindow,
    ) -> Result<Self> {
        let counts = context_user_counts(&clean_context, &noisy_context)?;
        Ok(NoisyContextPair {
            dialogue_id: dialogue_id.into(),
            turn_index,
            noisy_context,
            clean_context,
            measured_wer: counts.rate(),
        })
    }

    pub fn user_counts(&self) -> WerCounts {
        context_user_counts(&self.clean_context, &self.noisy_context).expect("structure checked on construction")
    }

    /// Fill in token ids for both contexts.
    pub fn encode(mut self, vocab: &Vocab, max_tokens: usize) -> Self {
        self.noisy_context = self.noisy_context.encode(vocab, max_tokens);
        self.clean_context = self.clean_context.encode(vocab, max_tokens);
        self
    }
}

/// Output of the k-fold self-transcription.
#[derive(Debug, Clone)]
pub struct NoisyGeneration {
    pub pairs: Vec<NoisyContextPair>,
    /// Utterance id -> autoregressive transcript.
    pub transcripts: BTreeMap<String, String>,
    /// Pooled WER of the transcripts of each held-out fold.
    pub fold_wers: Vec<f64>,
    /// Pooled WER over all generated transcripts.
    pub corpus_wer: f64,
}

/// For each fold, train on the other folds with `train_fn`, then transcribe
/// the held-out dialogues autoregressively. Emits one pair per turn from the
/// second turn on.
pub fn generate_noisy_contexts<F>(
    dialogues: &[Dialogue],
    folds: &FoldAssignment,
    k: usize,
    vocab: &Vocab,
    max_context_tokens: usize,
    mut train_fn: F,
) -> Result<NoisyGeneration>
where
    F: FnMut(usize, &[Dialogue]) -> Result<CaAsr>,
{
    if folds.k != k {
        return Err(Error::config(format!("fold assignment has {} folds, expected {k}", folds.k)));
    }
    if folds.membership.len() != dialogues.len() || dialogues.iter().any(|d| !folds.membership.contains_key(&d.id)) {
        return Err(Error::precondition("fold assignment does not cover the corpus exactly"));
    }
    let mut pairs = Vec::new();
    let mut transcripts = BTreeMap::new();
    let mut fold_wers = Vec::with_capacity(k);
    let mut total = WerCounts::default();
    for fold in 0..k {
        let (train, held): (Vec<Dialogue>, Vec<Dialogue>) =
            dialogues.iter().cloned().partition(|d| folds.in_training(fold, &d.id));
        if held.is_empty() {
            return Err(Error::precondition(format!("fold {fold} holds out no dialogues")));
        }
        log::info!("fold {fold}: training on {} dialogues, transcribing {}", train.len(), held.len());
        let model = train_fn(fold, &train)?;
        let refs: Vec<&Dialogue> = held.iter().collect();
        let preds = transcribe_dialogues(&model, vocab, &refs, ContextMode::Autoregressive, None)?;
        let mut counts = WerCounts::default();
        for (d, dp) in held.iter().zip(preds) {
            let hyp: BTreeMap<usize, String> = dp.iter().map(|p| (p.turn_index, p.hypothesis.clone())).collect();
            for p in &dp {
                counts += p.counts;
                transcripts.insert(utterance_id(&d.id, p.turn_index), p.hypothesis.clone());
            }
            let gt = ground_truth_transcripts(d);
            for t in 2..=d.turns.len() {
                let noisy = assemble_context(d, t, &hyp)?.encode(vocab, max_context_tokens);
                let clean = assemble_context(d, t, &gt)?.encode(vocab, max_context_tokens);
                pairs.push(NoisyContextPair::new(d.id.clone(), t, noisy, clean)?);
            }
        }
        fold_wers.push(counts.rate());
        total += counts;
    }
    pairs.sort_by(|a, b| (&a.dialogue_id, a.turn_index).cmp(&(&b.dialogue_id, b.turn_index)));
    Ok(NoisyGeneration {
        pairs,
        transcripts,
        fold_wers,
        corpus_wer: total.rate(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub removed: usize,
    pub removed_fraction: f64,
}

/// Drop pairs whose measured WER exceeds `max_wer`.
pub fn filter_noisy(pairs: Vec<NoisyContextPair>, max_wer: f64) -> (Vec<NoisyContextPair>, FilterReport) {
    let total = pairs.len();
    let kept: Vec<NoisyContextPair> = pairs.into_iter().filter(|p| p.measured_wer <= max_wer).collect();
    let removed = total - kept.len();
    let report = FilterReport {
        total,
        removed,
        removed_fraction: if total == 0 { 0.0 } else { removed as f64 / total as f64 },
    };
    log::info!("filter: removed {removed} of {total} pairs ({:.1} %)", 100.0 * report.removed_fraction);
    (kept, report)
}
