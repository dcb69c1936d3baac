//! Turn-by-turn evaluation with accumulated context, multi-condition WER
//! reports, and context-encoding diagnostics.

mod transcribe;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureSequence, NoiseConfig};
use crate::corpus::{Dialogue, Vocab};
use crate::model::{cosine_similarity, pool_context_encoding, CaAsr, Pooling};
use crate::seed;
use crate::textnorm::WerCounts;
use crate::training::NoisyContextPair;
use crate::{Error, Result};

pub use transcribe::{
    transcribe_dialogue, transcribe_dialogues, transcribe_turn, utterance_id, ContextMode, NoiseSpec,
    TurnPrediction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub reference: String,
    pub hypothesis: String,
    pub counts: WerCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// `no_noise`, `snr_20`, `snr_0`, ...
    pub label: String,
    /// `None` for the clean condition.
    pub snr_db: Option<f64>,
    pub wer: f64,
    pub counts: WerCounts,
    pub per_dialogue: BTreeMap<String, f64>,
    /// Pooled WER by turn position.
    pub per_turn_index: BTreeMap<usize, f64>,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl SimilaritySummary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        SimilaritySummary {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            median: sorted[sorted.len() / 2],
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Cosine similarity between pooled noisy and clean context encodings,
/// before and after context-encoder fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingDiagnostics {
    pub pairs: usize,
    pub before: SimilaritySummary,
    pub after: SimilaritySummary,
    pub delta_mean: f64,
    /// 95 % percentile-bootstrap interval of the mean paired delta.
    pub delta_ci95: (f64, f64),
    #[serde(skip)]
    pub similarities_before: Vec<f64>,
    #[serde(skip)]
    pub similarities_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub context_mode: ContextMode,
    pub seed: u64,
    pub conditions: Vec<ConditionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnrl_diagnostics: Option<EncodingDiagnostics>,
}

impl MetricsReport {
    pub fn condition(&self, label: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.label == label)
    }

    /// WER per condition label.
    pub fn wers(&self) -> BTreeMap<String, f64> {
        self.conditions.iter().map(|c| (c.label.clone(), c.wer)).collect()
    }

    /// Counts pooled over every condition.
    pub fn pooled_counts(&self) -> WerCounts {
        self.conditions.iter().map(|c| c.counts).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (condition, utterance).
    pub fn per_turn_csv(&self) -> String {
        let mut s = String::from("condition,dialogue_id,turn_index,substitutions,deletions,insertions,ref_words,wer,reference,hypothesis\n");
        for c in &self.conditions {
            for t in &c.turns {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{:.6},{},{}",
                    c.label,
                    t.dialogue_id,
                    t.turn_index,
                    t.counts.substitutions,
                    t.counts.deletions,
                    t.counts.insertions,
                    t.counts.ref_words,
                    t.counts.rate(),
                    t.reference,
                    t.hypothesis
                );
            }
        }
        s
    }
}

pub struct EvalOptions<'a> {
    pub label: String,
    pub mode: ContextMode,
    pub bank: &'a [FeatureSequence],
    pub seed: u64,
    pub checkpoint: Option<String>,
}

/// Corpus WER of `model` on `dialogues` under each noise condition. Every
/// condition covers the same utterances and draws the same noise clip per
/// utterance.
pub fn evaluate(
    model: &CaAsr,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    conditions: &[NoiseConfig],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if dialogues.is_empty() || dialogues.iter().all(|d| d.turns.is_empty()) {
        return Err(Error::precondition("evaluation needs at least one test utterance"));
    }
    if conditions.is_empty() {
        return Err(Error::config("no evaluation conditions"));
    }
    let refs: Vec<&Dialogue> = dialogues.iter().collect();
    let mut reports = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let spec = NoiseSpec {
            config: *cond,
            bank: opts.bank,
            seed: opts.seed,
        };
        let preds = transcribe_dialogues(model, vocab, &refs, opts.mode, cond.enabled.then_some(&spec))?;
        let mut counts = WerCounts::default();
        let mut per_dialogue = BTreeMap::new();
        let mut by_index: BTreeMap<usize, WerCounts> = BTreeMap::new();
        let mut turns = Vec::new();
        for dialogue_preds in preds {
            let mut dc = WerCounts::default();
            for p in dialogue_preds {
                dc += p.counts;
                *by_index.entry(p.turn_index).or_default() += p.counts;
                turns.push(TurnRecord {
                    dialogue_id: p.dialogue_id,
                    turn_index: p.turn_index,
                    reference: p.reference,
                    hypothesis: p.hypothesis,
                    counts: p.counts,
                });
            }
            if let Some(t) = turns.last() {
                per_dialogue.insert(t.dialogue_id.clone(), dc.rate());
            }
            counts += dc;
        }
        reports.push(ConditionReport {
            label: cond.label(),
            snr_db: cond.enabled.then_some(cond.snr_db),
            wer: counts.rate(),
            counts,
            per_dialogue,
            per_turn_index: by_index.into_iter().map(|(k, c)| (k, c.rate())).collect(),
            turns,
        });
    }
    Ok(MetricsReport {
        model: opts.label.clone(),
        checkpoint: opts.checkpoint.clone(),
        context_mode: opts.mode,
        seed: opts.seed,
        conditions: reports,
        cnrl_diagnostics: None,
    })
}

/// Pooled cosine similarity between noisy and clean encodings of each pair.
pub fn pair_similarities(model: &CaAsr, pairs: &[NoisyContextPair], pooling: Pooling) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let noisy: Vec<&[u32]> = chunk.iter().map(|p| p.noisy_context.token_ids.as_slice()).collect();
        let clean: Vec<&[u32]> = chunk.iter().map(|p| p.clean_context.token_ids.as_slice()).collect();
        let hn = model.encode_contexts(&noisy)?;
        let hc = model.encode_contexts(&clean)?;
        for (a, b) in hn.iter().zip(&hc) {
            out.push(cosine_similarity(
                &pool_context_encoding(a, pooling)?,
                &pool_context_encoding(b, pooling)?,
            )?);
        }
    }
    Ok(out)
}

/// Compare how closely two context encoders map noisy contexts onto their
/// clean counterparts.
pub fn compare_encodings(
    before: &CaAsr,
    after: &CaAsr,
    pairs: &[NoisyContextPair],
    pooling: Pooling,
    seed: u64,
) -> Result<EncodingDiagnostics> {
    if pairs.is_empty() {
        return Err(Error::precondition("compare_encodings needs at least one pair"));
    }
    let b = pair_similarities(before, pairs, pooling)?;
    let a = pair_similarities(after, pairs, pooling)?;
    let deltas: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = deltas.len();
    let delta_mean = deltas.iter().sum::<f64>() / n as f64;
    let mut rng = seed::rng(seed, "bootstrap", 0);
    let mut means: Vec<f64> = (0..2000)
        .map(|_| (0..n).map(|_| deltas[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (means.len() - 1) as f64).round()) as usize];
    Ok(EncodingDiagnostics {
        pairs: n,
        before: SimilaritySummary::of(&b),
        after: SimilaritySummary::of(&a),
        delta_mean,
        delta_ci95: (q(0.025), q(0.975)),
        similarities_before: b,
        similarities_after: a,
    })
}
