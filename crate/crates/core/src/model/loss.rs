use super::{CosineLossConfig, HiddenSeq, Pooling};
use crate::{Error, Result};

/// Reduce a hidden sequence to one vector over its valid positions.
pub fn pool_context_encoding(h: &HiddenSeq, pooling: Pooling) -> Result<Vec<f32>> {
    let valid: Vec<usize> = (0..h.len()).filter(|&i| h.mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::invalid("cannot pool a sequence with no valid positions"));
    }
    let d = h.dim();
    match pooling {
        Pooling::First => Ok(h.values.row(valid[0]).to_vec()),
        Pooling::Mean => {
            let mut acc = vec![0.0f64; d];
            for &i in &valid {
                for (a, &x) in acc.iter_mut().zip(h.values.row(i)) {
                    *a += x as f64;
                }
            }
            let n = valid.len() as f64;
            Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
        }
    }
}

pub fn cosine_similarity(x1: &[f32], x2: &[f32]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    let (mut dot, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x1.iter().zip(x2) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::invalid("cosine similarity is undefined for a zero vector"));
    }
    Ok(dot / (n1.sqrt() * n2.sqrt()))
}

/// `1 - cos` for `y = 1`, `max(0, cos - margin)` for `y = -1`.
pub fn cosine_embedding_loss(x1: &[f32], x2: &[f32], cfg: &CosineLossConfig) -> Result<f64> {
    cfg.validate()?;
    let c = cosine_similarity(x1, x2)?;
    Ok(if cfg.y == 1 {
        1.0 - c
    } else {
        (c - cfg.margin).max(0.0)
    })
}

/// Mean of [`cosine_embedding_loss`] over aligned pairs.
pub fn cosine_embedding_loss_batch(
    x1: &[Vec<f32>],
    x2: &[Vec<f32>],
    cfg: &CosineLossConfig,
) -> Result<f64> {
    if x1.len() != x2.len() || x1.is_empty() {
        return Err(Error::invalid(format!(
            "cosine loss needs equal, non-empty batches (got {} and {})",
            x1.len(),
            x2.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in x1.iter().zip(x2) {
        total += cosine_embedding_loss(a, b, cfg)?;
    }
    Ok(total / x1.len() as f64)
}
