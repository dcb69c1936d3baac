use super::{StageConfig, StageOutcome, Trainer};
use crate::corpus::{assemble_context, ground_truth_transcripts, Dialogue, Vocab};
use crate::model::{CaAsr, Dropout, ModelConfig, CONTEXT_ENCODER, DECODER};
use crate::seed;
use crate::tensor::Graph;
use crate::{Error, Result};

/// Dialogue history ending with the agent's last response, and the user
/// utterance that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct TextExample {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
}

/// One example per turn, including first turns with a BOS-only context.
/// Targets longer than the decoder limit are cut.
pub fn pretrain_examples(dialogues: &[Dialogue], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<TextExample>> {
    if !dialogues.iter().any(|d| d.turns.len() >= 2) {
        return Err(Error::precondition(
            "pre-training needs at least one dialogue with two or more turns",
        ));
    }
    let mut out = Vec::new();
    for d in dialogues {
        let gt = ground_truth_transcripts(d);
        for turn in &d.turns {
            let ctx = assemble_context(d, turn.index, &gt)?.encode(vocab, cfg.max_context_tokens);
            let mut target = vocab.tokenize(&turn.user_text);
            target.truncate(cfg.max_decode_len - 1);
            if !target.is_empty() {
                out.push(TextExample {
                    context: ctx.token_ids,
                    target,
                });
            }
        }
    }
    Ok(out)
}

/// Token-weighted mean next-utterance cross-entropy, without dropout.
pub fn validation_loss(model: &CaAsr, examples: &[TextExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::precondition("validation set is empty"));
    }
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(64) {
        let mut g = Graph::new(false);
        let c: Vec<&[u32]> = chunk.iter().map(|e| e.context.as_slice()).collect();
        let t: Vec<&[u32]> = chunk.iter().map(|e| e.target.as_slice()).collect();
        let l = model.pretrain_loss(&mut g, &c, &t, &mut Dropout::off())?;
        let n: usize = chunk.iter().map(|e| e.target.len() + 1).sum();
        total += g.scalar(l) as f64 * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Train the context encoder and decoder to predict the next user utterance
/// from text history; the decoder attends to the context encoding directly.
/// Returns the epoch with the lowest validation loss.
pub fn pretrain_decoder(
    train: &[TextExample],
    val: &[TextExample],
    model_cfg: &ModelConfig,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    if train.is_empty() {
        return Err(Error::precondition("no pre-training examples"));
    }
    let model = CaAsr::new(model_cfg.clone(), seed::derive_seed(cfg.seed, "pretrain_init", 0))?;
    let trainable = model.ids_with_prefixes(&[CONTEXT_ENCODER, DECODER]);
    let trainer = Trainer {
        cfg,
        trainable,
        n_examples: train.len(),
        dropout: model_cfg.dropout,
        component: "pretrain",
    };
    trainer.run(
        model,
        |m, g, batch, _, drop| {
            let c: Vec<&[u32]> = batch.iter().map(|&i| train[i].context.as_slice()).collect();
            let t: Vec<&[u32]> = batch.iter().map(|&i| train[i].target.as_slice()).collect();
            m.pretrain_loss(g, &c, &t, drop)
        },
        |m| validation_loss(m, val),
    )
}
