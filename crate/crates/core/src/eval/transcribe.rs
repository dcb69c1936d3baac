use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audio::{apply_noise, FeatureSequence, NoiseConfig};
use crate::corpus::{assemble_context, ContextWindow, Dialogue, SpecialToken, Vocab};
use crate::model::CaAsr;
use crate::seed;
use crate::textnorm::{normalize, wer_counts, WerCounts};
use crate::{Error, Result};

/// Where the user side of each turn's context comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// The model's own earlier transcripts.
    Autoregressive,
    /// Reference transcripts (upper bound).
    GroundTruth,
    /// BOS only, for the speech-only ablation.
    None,
}

/// Noise condition plus the clip bank and the seed that fixes the clip and
/// offset of every utterance.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec<'a> {
    pub config: NoiseConfig,
    pub bank: &'a [FeatureSequence],
    pub seed: u64,
}

impl NoiseSpec<'_> {
    /// Noisy copy of one utterance. The clip and offset depend only on the
    /// seed and the utterance id, so every model and every SNR level sees
    /// the same clip.
    pub fn apply(&self, features: &FeatureSequence, utterance_id: &str) -> Result<FeatureSequence> {
        let mut rng = seed::rng(self.seed, "eval_noise", seed::string_id(utterance_id));
        apply_noise(features, &self.config, self.bank, &mut rng)
    }
}

pub fn utterance_id(dialogue_id: &str, turn_index: usize) -> String {
    format!("{dialogue_id}/{turn_index}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub reference: String,
    pub hypothesis: String,
    /// The context the model saw for this turn.
    pub context: ContextWindow,
    pub counts: WerCounts,
}

/// Upper bound on utterances per forward pass.
const BATCH: usize = 64;

/// Transcribe dialogues turn by turn. Turn `t` of every dialogue is decoded
/// before any context for turn `t + 1` is assembled; dialogues are batched
/// together at equal turn index.
pub fn transcribe_dialogues(
    model: &CaAsr,
    vocab: &Vocab,
    dialogues: &[&Dialogue],
    mode: ContextMode,
    noise: Option<&NoiseSpec>,
) -> Result<Vec<Vec<TurnPrediction>>> {
    let max_tokens = model.config().max_context_tokens;
    let mut history: Vec<BTreeMap<usize, String>> = vec![BTreeMap::new(); dialogues.len()];
    let mut out: Vec<Vec<TurnPrediction>> = vec![Vec::new(); dialogues.len()];
    let max_turns = dialogues.iter().map(|d| d.turns.len()).max().unwrap_or(0);
    for t in 1..=max_turns {
        let active: Vec<usize> = (0..dialogues.len()).filter(|&i| dialogues[i].turns.len() >= t).collect();
        for chunk in active.chunks(BATCH) {
            let mut feats = Vec::with_capacity(chunk.len());
            let mut windows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let d = dialogues[i];
                let turn = d.turn(t).expect("active dialogue has turn t");
                let speech = turn.speech.as_ref().ok_or_else(|| {
                    Error::precondition(format!("dialogue {} turn {t}: no speech features", d.id))
                })?;
                feats.push(match noise {
                    Some(n) => n.apply(speech, &utterance_id(&d.id, t))?,
                    None => speech.clone(),
                });
                let window = match mode {
                    ContextMode::Autoregressive => assemble_context(d, t, &history[i])?.encode(vocab, max_tokens),
                    ContextMode::GroundTruth => {
                        assemble_context(d, t, &crate::corpus::ground_truth_transcripts(d))?.encode(vocab, max_tokens)
                    }
                    ContextMode::None => ContextWindow {
                        entries: Vec::new(),
                        token_ids: vec![SpecialToken::Bos.id()],
                    },
                };
                windows.push(window);
            }
            let feat_refs: Vec<&FeatureSequence> = feats.iter().collect();
            let ctx_refs: Vec<&[u32]> = windows.iter().map(|w| w.token_ids.as_slice()).collect();
            let hyps = model.transcribe_batch(&feat_refs, &ctx_refs)?;
            for ((&i, ids), window) in chunk.iter().zip(hyps).zip(windows) {
                let d = dialogues[i];
                let turn = d.turn(t).expect("active dialogue has turn t");
                let hypothesis = normalize(&vocab.detokenize(&ids));
                let reference = normalize(&turn.user_text);
                history[i].insert(t, hypothesis.clone());
                out[i].push(TurnPrediction {
                    dialogue_id: d.id.clone(),
                    turn_index: t,
                    counts: wer_counts(&reference, &hypothesis),
                    reference,
                    hypothesis,
                    context: window,
                });
            }
        }
    }
    Ok(out)
}

/// Single-dialogue form of [`transcribe_dialogues`].
pub fn transcribe_dialogue(
    model: &CaAsr,
    vocab: &Vocab,
    dialogue: &Dialogue,
    mode: ContextMode,
    noise: Option<&NoiseSpec>,
) -> Result<Vec<TurnPrediction>> {
    Ok(transcribe_dialogues(model, vocab, &[dialogue], mode, noise)?.remove(0))
}

/// Recognize one turn given explicit earlier user transcripts.
pub fn transcribe_turn(
    model: &CaAsr,
    vocab: &Vocab,
    dialogue: &Dialogue,
    turn_index: usize,
    user_history: &BTreeMap<usize, String>,
    noise: Option<&NoiseSpec>,
) -> Result<TurnPrediction> {
    let turn = dialogue.turn(turn_index).ok_or_else(|| {
        Error::precondition(format!("dialogue {} has no turn {turn_index}", dialogue.id))
    })?;
    let speech = turn
        .speech
        .as_ref()
        .ok_or_else(|| Error::precondition(format!("dialogue {} turn {turn_index}: no speech features", dialogue.id)))?;
    let speech = match noise {
        Some(n) => n.apply(speech, &utterance_id(&dialogue.id, turn_index))?,
        None => speech.clone(),
    };
    let window = assemble_context(dialogue, turn_index, user_history)?.encode(vocab, model.config().max_context_tokens);
    let ids = model.transcribe_batch(&[&speech], &[&window.token_ids])?.remove(0);
    let hypothesis = normalize(&vocab.detokenize(&ids));
    let reference = normalize(&turn.user_text);
    Ok(TurnPrediction {
        dialogue_id: dialogue.id.clone(),
        turn_index,
        counts: wer_counts(&reference, &hypothesis),
        reference,
        hypothesis,
        context: window,
    })
}
