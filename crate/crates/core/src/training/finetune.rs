use super::{StageConfig, StageOutcome, Trainer};
use crate::audio::{mask_audio, FeatureSequence, MaskConfig};
use crate::corpus::{assemble_context, ground_truth_transcripts, Dialogue, SpecialToken, Vocab};
use crate::eval::{transcribe_dialogues, utterance_id, ContextMode};
use crate::model::{CaAsr, ModelConfig, CONTEXT_ENCODER, DECODER};
use crate::seed;
use crate::textnorm::WerCounts;
use crate::{Error, Result};

/// One recognition training example: speech of a turn, the context it is
/// conditioned on, and its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrExample {
    pub utterance_id: String,
    pub features: FeatureSequence,
    pub context: Vec<u32>,
    pub target: Vec<u32>,
}

/// Examples with ground-truth contexts, or BOS-only contexts when
/// `speech_only` is set.
pub fn asr_examples(
    dialogues: &[Dialogue],
    vocab: &Vocab,
    cfg: &ModelConfig,
    speech_only: bool,
) -> Result<Vec<AsrExample>> {
    let mut out = Vec::new();
    for d in dialogues {
        let gt = ground_truth_transcripts(d);
        for turn in &d.turns {
            let features = turn.speech.clone().ok_or_else(|| {
                Error::precondition(format!("dialogue {} turn {}: missing speech features", d.id, turn.index))
            })?;
            let context = if speech_only {
                vec![SpecialToken::Bos.id()]
            } else {
                assemble_context(d, turn.index, &gt)?
                    .encode(vocab, cfg.max_context_tokens)
                    .token_ids
            };
            let mut target = vocab.tokenize(&turn.user_text);
            target.truncate(cfg.max_decode_len - 1);
            out.push(AsrExample {
                utterance_id: utterance_id(&d.id, turn.index),
                features,
                context,
                target,
            });
        }
    }
    Ok(out)
}

/// Pooled WER on `dev` in the given context mode, without noise or masking.
pub fn dev_wer(model: &CaAsr, vocab: &Vocab, dev: &[Dialogue], mode: ContextMode) -> Result<f64> {
    let refs: Vec<&Dialogue> = dev.iter().collect();
    let preds = transcribe_dialogues(model, vocab, &refs, mode, None)?;
    let counts: WerCounts = preds.iter().flatten().map(|p| p.counts).sum();
    if counts.ref_words == 0 {
        return Err(Error::precondition("development set has no reference words"));
    }
    Ok(counts.rate())
}

#[derive(Debug, Clone, Copy)]
pub enum DecoderInit<'a> {
    Random,
    /// Copy the context encoder and decoder of a pre-trained model.
    Pretrained(&'a CaAsr),
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions<'a> {
    pub init: DecoderInit<'a>,
    pub mask: MaskConfig,
    /// Context regime used for dev-set model selection.
    pub dev_mode: ContextMode,
}

/// Initial weights for fine-tuning: fresh, with the pre-trained context
/// encoder and decoder copied in byte-for-byte when requested.
pub fn finetune_init(model_cfg: &ModelConfig, init: DecoderInit, seed: u64) -> Result<CaAsr> {
    let mut model = CaAsr::new(model_cfg.clone(), seed::derive_seed(seed, "finetune_init", 0))?;
    if let DecoderInit::Pretrained(p) = init {
        if p.config() != model_cfg {
            return Err(Error::config("pre-trained model config differs from the fine-tuning config"));
        }
        model.params_mut().copy_matching(p.params(), &[CONTEXT_ENCODER, DECODER])?;
    }
    Ok(model)
}

fn train_asr(
    model: CaAsr,
    train: &[AsrExample],
    dev: &[Dialogue],
    vocab: &Vocab,
    mask: &MaskConfig,
    dev_mode: ContextMode,
    cfg: &StageConfig,
    component: &'static str,
) -> Result<StageOutcome> {
    mask.validate()?;
    let trainer = Trainer {
        cfg,
        trainable: model.params().ids().collect(),
        n_examples: train.len(),
        dropout: model.config().dropout,
        component,
    };
    let mask_component = format!("{component}_mask");
    trainer.run(
        model,
        |m, g, batch, epoch, drop| {
            let feats: Vec<FeatureSequence> = batch
                .iter()
                .map(|&i| {
                    let ex = &train[i];
                    let item = seed::string_id(&ex.utterance_id) ^ ((epoch as u64) << 48);
                    let mut rng = seed::rng(cfg.seed, &mask_component, item);
                    mask_audio(&ex.features, mask, &mut rng).0
                })
                .collect();
            let f: Vec<&FeatureSequence> = feats.iter().collect();
            let c: Vec<&[u32]> = batch.iter().map(|&i| train[i].context.as_slice()).collect();
            let t: Vec<&[u32]> = batch.iter().map(|&i| train[i].target.as_slice()).collect();
            m.asr_loss(g, &f, &c, &t, drop)
        },
        |m| dev_wer(m, vocab, dev, dev_mode),
    )
}

/// Joint training of every sub-network with teacher-forced cross-entropy and
/// train-time audio masking; returns the epoch with the lowest dev WER.
pub fn finetune_asr(
    train: &[AsrExample],
    dev: &[Dialogue],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    opts: &FinetuneOptions,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    let model = finetune_init(model_cfg, opts.init, cfg.seed)?;
    train_asr(model, train, dev, vocab, &opts.mask, opts.dev_mode, cfg, "finetune")
}

/// Continue training the whole recognizer, starting from `base`, on examples
/// whose contexts carry recognition noise.
pub fn full_finetune_with_noise(
    train: &[AsrExample],
    base: &CaAsr,
    dev: &[Dialogue],
    vocab: &Vocab,
    mask: &MaskConfig,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    train_asr(
        base.clone(),
        train,
        dev,
        vocab,
        mask,
        ContextMode::GroundTruth,
        cfg,
        "full_finetune",
    )
}
