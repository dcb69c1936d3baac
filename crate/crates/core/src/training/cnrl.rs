use super::{NoisyContextPair, StageConfig, StageOutcome, Trainer};
use crate::model::{
    cosine_embedding_loss_batch, pool_context_encoding, CaAsr, CosineLossConfig, Dropout, Pooling, CONTEXT_ENCODER,
};
use crate::tensor::{Graph, Mat, Var};
use crate::{Error, Result};

/// Pooled encodings of the clean contexts under `model`.
fn clean_targets(model: &CaAsr, pairs: &[NoisyContextPair], pooling: Pooling) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let ids: Vec<&[u32]> = chunk.iter().map(|p| p.clean_context.token_ids.as_slice()).collect();
        for h in model.encode_contexts(&ids)? {
            out.push(pool_context_encoding(&h, pooling)?);
        }
    }
    Ok(out)
}

fn pooled(model: &CaAsr, g: &mut Graph<f32>, ids: &[&[u32]], pooling: Pooling, drop: &mut Dropout) -> Result<Var> {
    let enc = model.context_encoder(g, ids, drop)?;
    Ok(match pooling {
        Pooling::Mean => g.mean_pool(enc.var, &enc.segments()),
        Pooling::First => {
            let index: Vec<(u32, u32)> = enc.offsets().into_iter().map(|o| (0, o as u32)).collect();
            g.gather_rows(&[enc.var], &index)
        }
    })
}

/// Mean cosine embedding loss between pooled noisy encodings under `model`
/// and the fixed clean targets.
pub fn cnrl_dev_loss(
    model: &CaAsr,
    pairs: &[NoisyContextPair],
    targets: &[Vec<f32>],
    loss_cfg: &CosineLossConfig,
) -> Result<f64> {
    let mut noisy = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let ids: Vec<&[u32]> = chunk.iter().map(|p| p.noisy_context.token_ids.as_slice()).collect();
        for h in model.encode_contexts(&ids)? {
            noisy.push(pool_context_encoding(&h, loss_cfg.pooling)?);
        }
    }
    cosine_embedding_loss_batch(&noisy, targets, loss_cfg)
}

/// Fine-tune only the context encoder so that pooled encodings of noisy
/// contexts match the encodings the frozen pre-CNRL encoder gives their
/// clean counterparts. Every other parameter stays bit-identical. Returns
/// the epoch with the lowest dev cosine loss.
pub fn train_cnrl(
    train: &[NoisyContextPair],
    dev: &[NoisyContextPair],
    base: &CaAsr,
    cfg: &StageConfig,
    loss_cfg: &CosineLossConfig,
) -> Result<StageOutcome> {
    loss_cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::precondition("CNRL needs non-empty training and dev pair sets"));
    }
    let pooling = loss_cfg.pooling;
    let train_targets = clean_targets(base, train, pooling)?;
    let dev_targets = clean_targets(base, dev, pooling)?;
    let d = base.config().hidden_dim;
    let trainer = Trainer {
        cfg,
        trainable: base.ids_with_prefixes(&[CONTEXT_ENCODER]),
        n_examples: train.len(),
        // The encoder runs deterministically so identical pairs give zero loss.
        dropout: 0.0,
        component: "cnrl",
    };
    trainer.run(
        base.clone(),
        |m, g, batch, _, drop| {
            let ids: Vec<&[u32]> = batch.iter().map(|&i| train[i].noisy_context.token_ids.as_slice()).collect();
            let x1 = pooled(m, g, &ids, pooling, drop)?;
            let mut target = Mat::zeros(batch.len(), d);
            for (r, &i) in batch.iter().enumerate() {
                target.row_mut(r).copy_from_slice(&train_targets[i]);
            }
            let x2 = g.input(target);
            Ok(g.cosine_embedding_loss(x1, x2, loss_cfg.y as f64, loss_cfg.margin))
        },
        |m| cnrl_dev_loss(m, dev, &dev_targets, loss_cfg),
    )
}
