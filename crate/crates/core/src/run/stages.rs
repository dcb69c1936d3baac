use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::{ArtifactRef, Layout, StageManifest, Staging};
use super::config::{DecoderInitKind, RunConfig};
use crate::audio::{generate_noise_bank, FeatureSequence, SpeechSynthesizer, DEFAULT_FRAME_RATE_HZ, VOICE_COUNT};
use crate::corpus::{
    assemble_context, generate_synthetic_dialogues, split_folds, Dialogue, FoldAssignment, GenerationConfig,
    Vocab, Vocabulary,
};
use crate::eval::{evaluate, utterance_id, ContextMode, EvalOptions, MetricsReport};
use crate::model::{Checkpoint, CheckpointMeta, ModelConfig};
use crate::seed::{self, derive_seed, string_id};
use crate::training::{
    asr_examples, build_cnrl_set, filter_noisy, finetune_asr, full_finetune_with_noise, generate_noisy_contexts,
    pretrain_decoder, pretrain_examples, train_cnrl, AsrExample, CnrlVariant, DecoderInit, FinetuneOptions,
    NoisyContextPair, StageConfig, StageOutcome,
};
use crate::{Error, Result};

/// Dialogue ids of each partition; folds cover the training dialogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    pub folds: FoldAssignment,
}

/// A loaded corpus with speech features attached.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    /// Text-only dialogues used for pre-training alone.
    pub extra: Vec<Dialogue>,
    pub vocab: Vocab,
    pub splits: Splits,
    pub manifest: ArtifactRef,
}

impl Corpus {
    fn select(&self, ids: &[String]) -> Vec<Dialogue> {
        let by_id: BTreeMap<&str, &Dialogue> = self.dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
        ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|d| (*d).clone())).collect()
    }

    pub fn train(&self) -> Vec<Dialogue> {
        self.select(&self.splits.train)
    }

    pub fn dev(&self) -> Vec<Dialogue> {
        self.select(&self.splits.dev)
    }

    pub fn test(&self) -> Vec<Dialogue> {
        self.select(&self.splits.test)
    }

    pub fn model_config(&self, cfg: &RunConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            ..cfg.model.clone()
        }
    }
}

/// Recognizers produced by fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrKind {
    /// Randomly initialized decoder.
    Random,
    /// Context encoder and decoder copied from pre-training.
    Pretrained,
    /// BOS-only contexts.
    SpeechOnly,
}

impl AsrKind {
    pub fn name(self) -> &'static str {
        match self {
            AsrKind::Random => "random",
            AsrKind::Pretrained => "pretrained",
            AsrKind::SpeechOnly => "speech_only",
        }
    }

    pub fn stage(self) -> String {
        format!("finetune-{}", self.name())
    }

    pub fn checkpoint(self) -> String {
        format!("checkpoints/asr_{}.ckpt", self.name())
    }
}

impl From<DecoderInitKind> for AsrKind {
    fn from(k: DecoderInitKind) -> Self {
        match k {
            DecoderInitKind::Random => AsrKind::Random,
            DecoderInitKind::Pretrained => AsrKind::Pretrained,
        }
    }
}

pub const PRETRAIN_CHECKPOINT: &str = "checkpoints/pretrain.ckpt";
pub const FULL_FINETUNE_CHECKPOINT: &str = "checkpoints/full_ft_s4.ckpt";
pub const NOISY_PAIRS: &str = "corpus/noisy/pairs.jsonl";

pub fn cnrl_checkpoint(base: AsrKind) -> String {
    format!("checkpoints/cnrl_{}.ckpt", base.name())
}

pub fn cnrl_set_path(variant: CnrlVariant) -> String {
    format!("corpus/noisy/cnrl_{variant}.jsonl")
}

/// Stage config with its seed derived from the run seed.
fn stage_cfg(cfg: &RunConfig, name: &str, base: &StageConfig) -> StageConfig {
    StageConfig {
        seed: derive_seed(cfg.seed, name, base.seed),
        ..base.clone()
    }
}

fn record_outcome(m: &mut StageManifest, outcome: &StageOutcome) {
    m.curve = outcome.curve.clone();
    m.selected_epoch = Some(outcome.selected_epoch);
    m.selected_metric = Some(outcome.selected_metric);
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(layout: &Layout, logical: &str) -> Result<Vec<T>> {
    let path = layout.resolve(logical)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.clone(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn save_checkpoint(staging: &mut Staging, logical: &str, ckpt: &Checkpoint) -> Result<ArtifactRef> {
    staging.write(logical, &ckpt.to_bytes()?)
}

fn load_checkpoint(layout: &Layout, logical: &str) -> Result<(Checkpoint, ArtifactRef)> {
    let path = layout.resolve(logical)?;
    if !path.exists() {
        return Err(Error::precondition(format!("missing checkpoint {}", path.display())));
    }
    let r = layout.reference(logical)?;
    Ok((Checkpoint::load(&path)?, r))
}

/// Generate the dialogue corpus, synthesize speech for every user turn and
/// split the dialogues into train, dev and test.
pub fn gen_data(cfg: &RunConfig) -> Result<StageManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let vocabulary = Vocabulary::default();
    let gen = GenerationConfig {
        n_dialogues: cfg.data.n_dialogues,
        turns_per_dialogue: cfg.data.turns_per_dialogue,
        vocabulary: vocabulary.clone(),
        seed: derive_seed(cfg.seed, "corpus", 0),
        id_prefix: "dlg".into(),
    };
    let mut dialogues = generate_synthetic_dialogues(&gen)?;
    let extra = generate_synthetic_dialogues(&GenerationConfig {
        n_dialogues: cfg.data.extra_pretrain_dialogues,
        seed: derive_seed(cfg.seed, "extra_corpus", 0),
        id_prefix: "ext".into(),
        ..gen.clone()
    })?;
    let vocab = Vocab::from_dialogues(dialogues.iter().chain(&extra));
    let mut synth = SpeechSynthesizer::default().with_confusable_pairs(&vocabulary.confusable);
    synth.dim = cfg.model.feature_dim;

    let mut staging = Staging::new(&layout);
    let mut n_turns = 0usize;
    let mut seconds = 0f64;
    for d in &mut dialogues {
        let voice = seed::rng(cfg.seed, "voice", string_id(&d.id)).random_range(0..VOICE_COUNT);
        for turn in &mut d.turns {
            let uid = utterance_id(&d.id, turn.index);
            let feats = synth.synthesize(&turn.user_text, voice, derive_seed(cfg.seed, "speech", string_id(&uid)))?;
            let rel = format!("features/{}_{}.caf", d.id, turn.index);
            let mut bytes = Vec::new();
            feats.write_to(&mut bytes).map_err(|e| Error::io(&rel, e))?;
            staging.write(&format!("corpus/{rel}"), &bytes)?;
            seconds += feats.duration_seconds() as f64;
            turn.speech_ref = Some(rel);
            n_turns += 1;
        }
    }

    let mut ids: Vec<String> = dialogues.iter().map(|d| d.id.clone()).collect();
    ids.shuffle(&mut seed::rng(cfg.seed, "data_split", 0));
    let n = ids.len();
    let n_test = ((cfg.data.test_fraction * n as f64).round() as usize).max(1);
    let n_dev = ((cfg.data.dev_fraction * n as f64).round() as usize).max(1);
    if n_test + n_dev >= n {
        return Err(Error::config(format!("{n} dialogues are too few for the dev and test fractions")));
    }
    let mut test: Vec<String> = ids[..n_test].to_vec();
    let mut dev: Vec<String> = ids[n_test..n_test + n_dev].to_vec();
    let mut train: Vec<String> = ids[n_test + n_dev..].to_vec();
    for v in [&mut test, &mut dev, &mut train] {
        v.sort();
    }
    let train_dialogues: Vec<Dialogue> = dialogues.iter().filter(|d| train.binary_search(&d.id).is_ok()).cloned().collect();
    let folds = split_folds(&train_dialogues, cfg.folds, derive_seed(cfg.seed, "folds", 0))?;
    let splits = Splits { train, dev, test, folds };

    let dialogues_ref = staging.write("corpus/dialogues.jsonl", &jsonl(&dialogues)?)?;
    staging.write("corpus/extra_text.jsonl", &jsonl(&extra)?)?;
    staging.write_json("corpus/vocab.json", &vocab)?;
    staging.write_json("corpus/splits.json", &splits)?;

    let mut m = StageManifest::new("gen-data", &cfg.hash());
    m.outputs.push(dialogues_ref);
    m.note("dialogues", dialogues.len());
    m.note("turns", n_turns);
    m.note("speech_hours", seconds / 3600.0);
    m.note("extra_text_dialogues", extra.len());
    m.note("vocab_size", vocab.len());
    m.note(
        "split_dialogues",
        BTreeMap::from([("train", splits.train.len()), ("dev", splits.dev.len()), ("test", splits.test.len())]),
    );
    log::info!("gen-data: {} dialogues, {n_turns} turns, vocabulary {}", dialogues.len(), vocab.len());
    staging.commit(m)
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let layout = Layout::new(&cfg.paths);
    let manifest = layout.load_manifest("gen-data")?;
    let mut dialogues: Vec<Dialogue> = read_jsonl(&layout, "corpus/dialogues.jsonl")?;
    for d in &mut dialogues {
        d.validate()?;
        for turn in &mut d.turns {
            let rel = turn
                .speech_ref
                .as_ref()
                .ok_or_else(|| Error::precondition(format!("dialogue {} turn {}: no speech", d.id, turn.index)))?;
            turn.speech = Some(FeatureSequence::load(&cfg.paths.corpus.join(rel))?);
        }
    }
    let extra: Vec<Dialogue> = read_jsonl(&layout, "corpus/extra_text.jsonl")?;
    let vocab = Vocab::load(&layout.resolve("corpus/vocab.json")?)?;
    let splits_path = layout.resolve("corpus/splits.json")?;
    let text = std::fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
    let splits: Splits = serde_json::from_str(&text)?;
    Ok(Corpus {
        dialogues,
        extra,
        vocab,
        splits,
        manifest: manifest.self_ref.expect("loaded manifests carry their reference"),
    })
}

/// Text-only pre-training of the context encoder and decoder.
pub fn pretrain(cfg: &RunConfig) -> Result<StageManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let corpus = load_corpus(cfg)?;
    let model_cfg = corpus.model_config(cfg);
    let mut text = corpus.train();
    text.extend(corpus.extra.iter().cloned());
    let train = pretrain_examples(&text, &corpus.vocab, &model_cfg)?;
    let val = pretrain_examples(&corpus.dev(), &corpus.vocab, &model_cfg)?;
    let scfg = stage_cfg(cfg, "pretrain", &cfg.pretrain);
    log::info!("pretrain: {} examples, {} validation", train.len(), val.len());
    let outcome = pretrain_decoder(&train, &val, &model_cfg, &scfg)?;

    let mut staging = Staging::new(&layout);
    let ckpt = Checkpoint::new(
        outcome.model.clone(),
        corpus.vocab.clone(),
        CheckpointMeta {
            stage: "pretrain".into(),
            parent: None,
            seed: scfg.seed,
            selected_epoch: outcome.selected_epoch,
            selection_value: Some(outcome.selected_metric),
        },
    );
    let out = save_checkpoint(&mut staging, PRETRAIN_CHECKPOINT, &ckpt)?;
    let mut m = StageManifest::new("pretrain", &cfg.hash());
    m.inputs.push(corpus.manifest.clone());
    m.outputs.push(out);
    record_outcome(&mut m, &outcome);
    m.note("train_examples", train.len());
    staging.commit(m)
}

fn decoder_init_source(
    layout: &Layout,
    kind: AsrKind,
) -> Result<Option<(Checkpoint, ArtifactRef)>> {
    match kind {
        AsrKind::Pretrained => load_checkpoint(layout, PRETRAIN_CHECKPOINT)
            .map(Some)
            .map_err(|e| Error::precondition(format!("{e}; run `pretrain` first"))),
        _ => Ok(None),
    }
}

/// Fine-tune a recognizer of the given kind on the training split.
pub fn finetune(cfg: &RunConfig, kind: AsrKind) -> Result<StageManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let corpus = load_corpus(cfg)?;
    let model_cfg = corpus.model_config(cfg);
    let speech_only = kind == AsrKind::SpeechOnly;
    let train = asr_examples(&corpus.train(), &corpus.vocab, &model_cfg, speech_only)?;
    let init_src = decoder_init_source(&layout, kind)?;
    let opts = FinetuneOptions {
        init: match &init_src {
            Some((c, _)) => DecoderInit::Pretrained(&c.model),
            None => DecoderInit::Random,
        },
        mask: cfg.mask,
        dev_mode: if speech_only { ContextMode::None } else { ContextMode::Autoregressive },
    };
    let scfg = stage_cfg(cfg, "finetune", &cfg.finetune);
    log::info!("finetune ({}): {} examples", kind.name(), train.len());
    let outcome = finetune_asr(&train, &corpus.dev(), &corpus.vocab, &model_cfg, &opts, &scfg)?;

    let mut staging = Staging::new(&layout);
    let ckpt = Checkpoint::new(
        outcome.model.clone(),
        corpus.vocab.clone(),
        CheckpointMeta {
            stage: kind.stage(),
            parent: init_src.as_ref().map(|(_, r)| r.sha256.clone()),
            seed: scfg.seed,
            selected_epoch: outcome.selected_epoch,
            selection_value: Some(outcome.selected_metric),
        },
    );
    let out = save_checkpoint(&mut staging, &kind.checkpoint(), &ckpt)?;
    let mut m = StageManifest::new(kind.stage(), &cfg.hash());
    m.inputs.push(corpus.manifest.clone());
    if let Some((_, r)) = init_src {
        m.inputs.push(r);
    }
    m.outputs.push(out);
    record_outcome(&mut m, &outcome);
    m.note("train_examples", train.len());
    staging.commit(m)
}

/// Per-fold self-transcription of the training split.
pub fn gen_noisy(cfg: &RunConfig) -> Result<StageManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let corpus = load_corpus(cfg)?;
    let model_cfg = corpus.model_config(cfg);
    let kind = AsrKind::from(cfg.flags.decoder_init);
    let init_src = decoder_init_source(&layout, kind)?;
    let dev = corpus.dev();
    let train = corpus.train();
    let mut fold_curves = Vec::new();
    let generation = generate_noisy_contexts(
        &train,
        &corpus.splits.folds,
        cfg.folds,
        &corpus.vocab,
        model_cfg.max_context_tokens,
        |fold, dialogues| {
            let examples = asr_examples(dialogues, &corpus.vocab, &model_cfg, false)?;
            let opts = FinetuneOptions {
                init: match &init_src {
                    Some((c, _)) => DecoderInit::Pretrained(&c.model),
                    None => DecoderInit::Random,
                },
                mask: cfg.mask,
                dev_mode: ContextMode::Autoregressive,
            };
            let mut scfg = stage_cfg(cfg, "fold_finetune", &cfg.fold_finetune);
            scfg.seed = derive_seed(scfg.seed, "fold", fold as u64);
            let outcome = finetune_asr(&examples, &dev, &corpus.vocab, &model_cfg, &opts, &scfg)?;
            fold_curves.push(outcome.curve.clone());
            Ok(outcome.model)
        },
    )?;
    let stripped: Vec<NoisyContextPair> = generation
        .pairs
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.noisy_context.token_ids.clear();
            p.clean_context.token_ids.clear();
            p
        })
        .collect();
    let mut staging = Staging::new(&layout);
    let out = staging.write(NOISY_PAIRS, &jsonl(&stripped)?)?;
    staging.write_json("corpus/noisy/transcripts.json", &generation.transcripts)?;
    let mut m = StageManifest::new("gen-noisy", &cfg.hash());
    m.inputs.push(corpus.manifest.clone());
    if let Some((_, r)) = init_src {
        m.inputs.push(r);
    }
    m.outputs.push(out);
    m.note("pairs", generation.pairs.len());
    m.note("fold_wers", &generation.fold_wers);
    m.note("corpus_wer", generation.corpus_wer);
    m.note("fold_curves", &fold_curves);
    log::info!(
        "gen-noisy: {} pairs, transcript WER {:.3}",
        generation.pairs.len(),
        generation.corpus_wer
    );
    staging.commit(m)
}

fn load_pairs(layout: &Layout, logical: &str, vocab: &Vocab, max_tokens: usize) -> Result<Vec<NoisyContextPair>> {
    let pairs: Vec<NoisyContextPair> = read_jsonl(layout, logical)?;
    Ok(pairs.into_iter().map(|p| p.encode(vocab, max_tokens)).collect())
}

/// Filter the generated pairs and build one CNRL training set.
pub fn build_cnrl(cfg: &RunConfig, variant: CnrlVariant) -> Result<StageManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let corpus = load_corpus(cfg)?;
    let noisy_manifest = layout.load_manifest("gen-noisy")?;
    let max_tokens = cfg.model.max_context_tokens;
    let pairs = load_pairs(&layout, NOISY_PAIRS, &corpus.vocab, max_tokens)?;
    let (kept, filter) = filter_noisy(pairs, cfg.max_noisy_wer);
    if kept.is_empty() {
        return Err(Error::precondition("no noisy pairs survive the WER filter"));
    }
    let set = build_cnrl_set(
        &kept,
        variant,
        &cfg.word_drop,
        derive_seed(cfg.seed, "cnrl_set", 0),
        &corpus.vocab,
        max_tokens,
    )?;
    let counts: crate::textnorm::WerCounts = set.iter().map(|p| p.user_counts()).sum();
    let stripped: Vec<NoisyContextPair> = set
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.noisy_context.token_ids.clear();
            p.clean_context.token_ids.clear();
            p
        })
        .collect();
    let stage = format!("build-cnrl-{variant}");
    let mut staging = Staging::new(&layout);
    let out = staging.write(&cnrl_set_path(variant), &jsonl(&stripped)?)?;
    let mut m = StageManifest::new(stage, &cfg.hash());
    m.inputs.push(corpus.manifest.clone());
    m.inputs.push(noisy_manifest.self_ref.clone().expect("loaded"));
    m.outputs.push(out);
    m.note("filter", &filter);
    m.note("pairs", set.len());
    m.note("context_wer", counts.rate());
    log::info!("build-cnrl {variant}: {} pairs, context WER {:.4}", set.len(), counts.rate());
    staging.commit(m)
}

/// Context-encoder fine-tuning of one recognizer on the configured CNRL set.
pub fn cnrl(cfg: &RunConfig, base: AsrKind) -> Result<StageManifest> {
    cfg.validate()?;
    if base == AsrKind::SpeechOnly {
        return Err(Error::config("the speech-only recognizer has no context to refine"));
    }
    let layout = Layout::new(&cfg.paths);
    let corpus = load_corpus(cfg)?;
    let set_manifest = layout.load_manifest(&format!("build-cnrl-{}", cfg.cnrl_variant))?;
    let (base_ckpt, base_ref) = load_checkpoint(&layout, &base.checkpoint())?;
    let pairs = load_pairs(
        &layout,
        &cnrl_set_path(cfg.cnrl_variant),
        &corpus.vocab,
        base_ckpt.model.config().max_context_tokens,
    )?;
    // Dialogues of the first fold serve as the CNRL dev set.
    let held = corpus.splits.folds.held_out(0);
    let (dev, train): (Vec<NoisyContextPair>, Vec<NoisyContextPair>) =
        pairs.into_iter().partition(|p| held.contains(p.dialogue_id.as_str()));
    let scfg = stage_cfg(cfg, "cnrl", &cfg.cnrl);
    log::info!("cnrl ({}): {} train pairs, {} dev", base.name(), train.len(), dev.len());
    let outcome = train_cnrl(&train, &dev, &base_ckpt.model, &scfg, &cfg.cosine)?;

    let stage = format!("cnrl-{}", base.name());
    let mut staging = Staging::new(&layout);
    let ckpt = Checkpoint::new(
        outcome.model.clone(),
        corpus.vocab.clone(),
        CheckpointMeta {
            stage: stage.clone(),
            parent: Some(base_ref.sha256.clone()),
            seed: scfg.seed,
            selected_epoch: outcome.selected_epoch,
            selection_value: Some(outcome.selected_metric),
        },
    );
    let out = save_checkpoint(&mut staging, &cnrl_checkpoint(base), &ckpt)?;
    let mut m = StageManifest::new(stage, &cfg.hash());
    m.inputs.push(set_manifest.self_ref.clone().expect("loaded"));
    m.inputs.push(base_ref);
    m.outputs.push(out);
    record_outcome(&mut m, &outcome);
    m.note("train_pairs", train.len());
    m.note("dev_pairs", dev.len());
    staging.commit(m)
}

/// Whole-model fine-tuning on S4 contexts paired with the speech of each turn.
pub fn full_finetune_s4(cfg: &RunConfig) -> Result<StageManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let corpus = load_corpus(cfg)?;
    let set_manifest = layout.load_manifest("build-cnrl-S4")?;
    let base = AsrKind::from(cfg.flags.decoder_init);
    let (base_ckpt, base_ref) = load_checkpoint(&layout, &base.checkpoint())?;
    let model_cfg = base_ckpt.model.config().clone();
    let pairs = load_pairs(&layout, &cnrl_set_path(CnrlVariant::S4), &corpus.vocab, model_cfg.max_context_tokens)?;
    let by_id: BTreeMap<&str, &Dialogue> = corpus.dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut train = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let d = by_id
            .get(p.dialogue_id.as_str())
            .ok_or_else(|| Error::precondition(format!("pair refers to unknown dialogue {}", p.dialogue_id)))?;
        let turn = d.turn(p.turn_index).ok_or_else(|| Error::precondition("pair refers to a missing turn"))?;
        let mut target = corpus.vocab.tokenize(&turn.user_text);
        target.truncate(model_cfg.max_decode_len - 1);
        train.push(AsrExample {
            utterance_id: utterance_id(&d.id, turn.index),
            features: turn.speech.clone().expect("loaded corpus has speech"),
            context: p.noisy_context.token_ids.clone(),
            target,
        });
    }
    let scfg = stage_cfg(cfg, "full_finetune", &cfg.full_finetune);
    log::info!("full-finetune-s4: {} examples", train.len());
    let outcome =
        full_finetune_with_noise(&train, &base_ckpt.model, &corpus.dev(), &corpus.vocab, &cfg.mask, &scfg)?;
    let mut staging = Staging::new(&layout);
    let ckpt = Checkpoint::new(
        outcome.model.clone(),
        corpus.vocab.clone(),
        CheckpointMeta {
            stage: "full-finetune-s4".into(),
            parent: Some(base_ref.sha256.clone()),
            seed: scfg.seed,
            selected_epoch: outcome.selected_epoch,
            selection_value: Some(outcome.selected_metric),
        },
    );
    let out = save_checkpoint(&mut staging, FULL_FINETUNE_CHECKPOINT, &ckpt)?;
    let mut m = StageManifest::new("full-finetune-s4", &cfg.hash());
    m.inputs.push(set_manifest.self_ref.clone().expect("loaded"));
    m.inputs.push(base_ref);
    m.outputs.push(out);
    record_outcome(&mut m, &outcome);
    m.note("train_examples", train.len());
    staging.commit(m)
}

/// Noise clips shared by every evaluation of a run.
pub fn noise_bank(cfg: &RunConfig) -> Vec<FeatureSequence> {
    generate_noise_bank(
        cfg.noise.bank_size,
        cfg.model.feature_dim,
        DEFAULT_FRAME_RATE_HZ,
        cfg.noise_bank_seed(),
    )
}

pub fn eval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "eval", 0)
}

/// Test-split WER of one checkpoint under every configured condition.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    corpus: &Corpus,
    checkpoint: &str,
    label: &str,
    mode: ContextMode,
    bank: &[FeatureSequence],
) -> Result<MetricsReport> {
    let layout = Layout::new(&cfg.paths);
    let (ckpt, r) = load_checkpoint(&layout, checkpoint)?;
    if ckpt.vocab != corpus.vocab {
        return Err(Error::precondition(format!("{checkpoint}: vocabulary differs from the corpus")));
    }
    log::info!("eval {label} ({mode:?})");
    evaluate(
        &ckpt.model,
        &ckpt.vocab,
        &corpus.test(),
        &cfg.noise_conditions(),
        &EvalOptions {
            label: label.to_string(),
            mode,
            bank,
            seed: eval_seed(cfg),
            checkpoint: Some(r.sha256),
        },
    )
}

/// Noisy/clean context pairs built from a report's autoregressive
/// transcripts, for every condition and every turn from the second on.
pub fn pairs_from_report(
    report: &MetricsReport,
    corpus: &Corpus,
    max_tokens: usize,
) -> Result<Vec<NoisyContextPair>> {
    let by_id: BTreeMap<&str, &Dialogue> = corpus.dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::new();
    for cond in &report.conditions {
        let mut hyps: BTreeMap<&str, BTreeMap<usize, String>> = BTreeMap::new();
        for t in &cond.turns {
            hyps.entry(t.dialogue_id.as_str()).or_default().insert(t.turn_index, t.hypothesis.clone());
        }
        for (id, h) in hyps {
            let d = by_id[id];
            let gt = crate::corpus::ground_truth_transcripts(d);
            for t in 2..=d.turns.len() {
                let noisy = assemble_context(d, t, &h)?.encode(&corpus.vocab, max_tokens);
                let clean = assemble_context(d, t, &gt)?.encode(&corpus.vocab, max_tokens);
                out.push(NoisyContextPair::new(id, t, noisy, clean)?);
            }
        }
    }
    Ok(out)
}
