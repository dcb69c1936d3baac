//! The three training stages (decoder pre-training, ASR fine-tuning with
//! audio masking, context-noise representation learning), the k-fold
//! noisy-context generator and the CNRL dataset builders.

mod cnrl;
mod finetune;
mod noisy;
mod pretrain;
mod worddrop;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{CaAsr, Dropout};
use crate::seed;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Grads, Graph, ParamId, Var};
use crate::{Error, Result};

pub use cnrl::{cnrl_dev_loss, train_cnrl};
pub use finetune::{
    asr_examples, dev_wer, finetune_asr, full_finetune_with_noise, AsrExample, DecoderInit, FinetuneOptions,
};
pub use noisy::{filter_noisy, generate_noisy_contexts, FilterReport, NoisyContextPair};
pub use pretrain::{pretrain_decoder, pretrain_examples, validation_loss, TextExample};
pub use worddrop::{build_cnrl_set, word_drop, CnrlVariant, WordDropConfig, WordDropOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Cnrl,
}

/// Lower is better for every metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    ValLoss,
    DevWer,
    CnrlDevLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Weight decay applied directly to the weights rather than through the
    /// gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Linear learning-rate warm-up over this many optimizer steps.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl StageConfig {
    /// AdamW, step size 5e-5, weight decay 1e-5, batch 32, 10 epochs.
    pub fn pretrain() -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decoupled_weight_decay: true,
            batch_size: 32,
            max_epochs: 10,
            selection_metric: SelectionMetric::ValLoss,
            seed: 0,
            grad_clip: None,
            warmup_steps: 0,
        }
    }

    /// Adam, step size 2e-5, batch 64, 10 epochs.
    pub fn finetune() -> Self {
        StageConfig {
            stage: Stage::Finetune,
            learning_rate: 2e-5,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
            batch_size: 64,
            selection_metric: SelectionMetric::DevWer,
            ..Self::pretrain()
        }
    }

    /// Adam, step size 5e-4, batch 128, at most 5 epochs.
    pub fn cnrl() -> Self {
        StageConfig {
            stage: Stage::Cnrl,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
            batch_size: 128,
            max_epochs: 5,
            selection_metric: SelectionMetric::CnrlDevLoss,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = format!("{:?}", self.stage).to_lowercase();
        if self.batch_size == 0 {
            return Err(Error::config(format!("{name}: batch_size must be positive")));
        }
        if self.max_epochs == 0 {
            return Err(Error::config(format!("{name}: max_epochs must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{name}: learning_rate must be positive")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!("{name}: betas must lie in [0, 1)")));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!("{name}: weight_decay must be non-negative")));
        }
        if self.stage == Stage::Cnrl && self.max_epochs > 5 {
            return Err(Error::config("cnrl: at most 5 epochs"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: f64,
    /// Wall-clock seconds; kept out of serialized output so that reports
    /// stay byte-reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

/// Weights selected by the stage's metric plus the full per-epoch curve.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: CaAsr,
    pub curve: Vec<EpochLog>,
    pub selected_epoch: usize,
    pub selected_metric: f64,
}

impl StageOutcome {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.curve.iter().map(|e| e.seconds).sum::<f64>() / self.curve.len().max(1) as f64
    }
}

/// Shared minibatch loop: shuffle, build a loss graph per batch, clip,
/// step, evaluate after every epoch and keep the best weights.
pub(crate) struct Trainer<'a> {
    pub cfg: &'a StageConfig,
    pub trainable: Vec<ParamId>,
    pub n_examples: usize,
    pub dropout: f64,
    pub component: &'static str,
}

impl Trainer<'_> {
    pub fn run<L, E>(&self, mut model: CaAsr, mut loss_fn: L, mut eval_fn: E) -> Result<StageOutcome>
    where
        L: FnMut(&CaAsr, &mut Graph<f32>, &[usize], usize, &mut Dropout) -> Result<Var>,
        E: FnMut(&CaAsr) -> Result<f64>,
    {
        self.cfg.validate()?;
        if self.n_examples == 0 {
            return Err(Error::Stage {
                stage: self.component.into(),
                reason: "no training examples".into(),
            });
        }
        let mut adam = Adam::new(self.cfg.adam(), model.params(), self.trainable.clone());
        let mut grads = Grads::new(model.params().len());
        let mut order: Vec<usize> = (0..self.n_examples).collect();
        let mut best: Option<(f64, usize, CaAsr)> = None;
        let mut curve = Vec::with_capacity(self.cfg.max_epochs);
        let mut step = 0usize;
        for epoch in 1..=self.cfg.max_epochs {
            let started = Instant::now();
            let mut rng = seed::rng(self.cfg.seed, self.component, epoch as u64);
            order.shuffle(&mut rng);
            let (mut loss_sum, mut batches) = (0.0, 0usize);
            for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
                let mut g = Graph::new(true);
                let mut drop = Dropout::train(
                    self.dropout,
                    seed::rng(
                        self.cfg.seed,
                        &format!("{}_dropout", self.component),
                        ((epoch as u64) << 32) | b as u64,
                    ),
                );
                let loss = loss_fn(&model, &mut g, batch, epoch, &mut drop)?;
                let value = g.scalar(loss) as f64;
                if !value.is_finite() {
                    return Err(Error::Stage {
                        stage: self.component.into(),
                        reason: format!("non-finite loss at epoch {epoch}, batch {b}"),
                    });
                }
                g.backward(loss);
                grads.clear();
                g.collect_param_grads(&mut grads);
                if let Some(c) = self.cfg.grad_clip {
                    clip_grad_norm(&mut grads, c as f32);
                }
                step += 1;
                let scale = if self.cfg.warmup_steps > 0 {
                    (step as f64 / self.cfg.warmup_steps as f64).min(1.0)
                } else {
                    1.0
                };
                adam.step(model.params_mut(), &grads, scale);
                loss_sum += value;
                batches += 1;
            }
            let metric = eval_fn(&model)?;
            let train_loss = loss_sum / batches as f64;
            log::info!(
                "{} epoch {epoch}: train loss {train_loss:.4}, {:?} {metric:.4}",
                self.component,
                self.cfg.selection_metric
            );
            curve.push(EpochLog {
                epoch,
                train_loss,
                metric,
                seconds: started.elapsed().as_secs_f64(),
            });
            if best.as_ref().is_none_or(|(m, _, _)| metric < *m) {
                best = Some((metric, epoch, model.clone()));
            }
        }
        let (selected_metric, selected_epoch, model) = best.expect("at least one epoch");
        Ok(StageOutcome {
            model,
            curve,
            selected_epoch,
            selected_metric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_published_settings() {
        let p = StageConfig::pretrain();
        assert_eq!((p.learning_rate, p.weight_decay, p.batch_size, p.max_epochs), (5e-5, 1e-5, 32, 10));
        assert!(p.decoupled_weight_decay);
        assert_eq!((p.beta1, p.beta2), (0.9, 0.999));
        let f = StageConfig::finetune();
        assert_eq!((f.learning_rate, f.batch_size, f.max_epochs), (2e-5, 64, 10));
        assert!(!f.decoupled_weight_decay);
        let c = StageConfig::cnrl();
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs), (5e-4, 128, 5));
        for cfg in [p, f, c] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = StageConfig::cnrl();
        c.max_epochs = 6;
        assert!(c.validate().is_err());
        let mut f = StageConfig::finetune();
        f.batch_size = 0;
        assert!(f.validate().is_err());
        f = StageConfig::finetune();
        f.learning_rate = 0.0;
        assert!(f.validate().is_err());
    }
}
