use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{MaskConfig, NoiseConfig};
use crate::model::{CosineLossConfig, ModelConfig};
use crate::training::{CnrlVariant, SelectionMetric, Stage, StageConfig, WordDropConfig};
use crate::{Error, Result};

/// Environment variables that may override the output directories.
pub const ENV_CORPUS_DIR: &str = "CTXASR_CORPUS_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "CTXASR_CHECKPOINT_DIR";
pub const ENV_REPORT_DIR: &str = "CTXASR_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths::under(Path::new("run"))
    }
}

impl Paths {
    pub fn under(root: &Path) -> Self {
        Paths {
            corpus: root.join("corpus"),
            checkpoints: root.join("checkpoints"),
            reports: root.join("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_dialogues: usize,
    pub turns_per_dialogue: (usize, usize),
    pub dev_fraction: f64,
    pub test_fraction: f64,
    /// Size of an additional text-only corpus used only for pre-training.
    pub extra_pretrain_dialogues: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_dialogues: 300,
            turns_per_dialogue: (5, 8),
            dev_fraction: 0.1,
            test_fraction: 0.15,
            extra_pretrain_dialogues: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    pub include_clean: bool,
    pub snr_db: Vec<f64>,
    /// Number of clips in the noise bank.
    pub bank_size: usize,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            include_clean: true,
            snr_db: vec![20.0, 0.0],
            bank_size: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInitKind {
    Random,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    /// Default context regime of the `eval` command.
    pub use_ground_truth_context: bool,
    /// Decoder initialization of the fold models and the `finetune` command.
    pub decoder_init: DecoderInitKind,
    pub gen_noisy: bool,
    pub cnrl: bool,
    pub full_finetune: bool,
    pub speech_only_baseline: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            use_ground_truth_context: false,
            decoder_init: DecoderInitKind::Pretrained,
            gen_noisy: true,
            cnrl: true,
            full_finetune: true,
            speech_only_baseline: true,
        }
    }
}

/// One JSON document configuring every stage of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    /// `vocab_size` is filled in from the generated corpus.
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Fine-tuning of each fold model during noisy-context generation.
    pub fold_finetune: StageConfig,
    pub cnrl: StageConfig,
    pub full_finetune: StageConfig,
    pub mask: MaskConfig,
    pub noise: NoiseSettings,
    pub folds: usize,
    pub max_noisy_wer: f64,
    pub word_drop: WordDropConfig,
    pub cnrl_variant: CnrlVariant,
    pub cosine: CosineLossConfig,
    pub flags: Flags,
}

impl Default for RunConfig {
    /// Desk-scale defaults. Step sizes and batch sizes are larger than the
    /// published settings because the models here start from scratch and
    /// see far fewer optimizer steps.
    fn default() -> Self {
        let finetune = StageConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 10,
            grad_clip: Some(1.0),
            warmup_steps: 100,
            ..StageConfig::finetune()
        };
        RunConfig {
            seed: 7,
            paths: Paths::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                max_epochs: 10,
                grad_clip: Some(1.0),
                warmup_steps: 100,
                ..StageConfig::pretrain()
            },
            fold_finetune: StageConfig {
                max_epochs: 3,
                ..finetune.clone()
            },
            full_finetune: StageConfig {
                learning_rate: 3e-4,
                max_epochs: 3,
                warmup_steps: 0,
                ..finetune.clone()
            },
            finetune,
            cnrl: StageConfig {
                learning_rate: 5e-4,
                batch_size: 32,
                max_epochs: 5,
                grad_clip: Some(1.0),
                ..StageConfig::cnrl()
            },
            mask: MaskConfig::default(),
            noise: NoiseSettings::default(),
            folds: 10,
            max_noisy_wer: 0.20,
            word_drop: WordDropConfig::default(),
            cnrl_variant: CnrlVariant::S4,
            cosine: CosineLossConfig::default(),
            flags: Flags::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Replace output directories from the environment, if set.
    pub fn apply_env_overrides(&mut self) {
        for (var, slot) in [
            (ENV_CORPUS_DIR, &mut self.paths.corpus),
            (ENV_CHECKPOINT_DIR, &mut self.paths.checkpoints),
            (ENV_REPORT_DIR, &mut self.paths.reports),
        ] {
            if let Some(v) = std::env::var_os(var) {
                *slot = PathBuf::from(v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_dialogues == 0 || d.turns_per_dialogue.0 == 0 || d.turns_per_dialogue.0 > d.turns_per_dialogue.1 {
            return Err(Error::config("data: need dialogues and a non-empty turn range"));
        }
        if !(0.0..1.0).contains(&d.dev_fraction)
            || !(0.0..1.0).contains(&d.test_fraction)
            || d.dev_fraction + d.test_fraction >= 1.0
        {
            return Err(Error::config("data: dev and test fractions must leave training data"));
        }
        for (name, s, stage, metric) in [
            ("pretrain", &self.pretrain, Stage::Pretrain, SelectionMetric::ValLoss),
            ("finetune", &self.finetune, Stage::Finetune, SelectionMetric::DevWer),
            ("fold_finetune", &self.fold_finetune, Stage::Finetune, SelectionMetric::DevWer),
            ("cnrl", &self.cnrl, Stage::Cnrl, SelectionMetric::CnrlDevLoss),
            ("full_finetune", &self.full_finetune, Stage::Finetune, SelectionMetric::DevWer),
        ] {
            s.validate()?;
            if s.stage != stage || s.selection_metric != metric {
                return Err(Error::config(format!(
                    "{name}: expected stage {stage:?} selected by {metric:?}"
                )));
            }
        }
        self.mask.validate()?;
        self.word_drop.validate()?;
        self.cosine.validate()?;
        if self.cosine.y != 1 {
            return Err(Error::config("cosine.y must be 1 for CNRL training"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.max_noisy_wer) {
            return Err(Error::config("max_noisy_wer must lie in [0, 1]"));
        }
        if self.noise.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("noise.snr_db entries must be finite"));
        }
        if !self.noise.include_clean && self.noise.snr_db.is_empty() {
            return Err(Error::config("no evaluation conditions"));
        }
        if self.noise.bank_size == 0 && !self.noise.snr_db.is_empty() {
            return Err(Error::config("noise.bank_size must be positive"));
        }
        if (self.flags.cnrl || self.flags.full_finetune) && !self.flags.gen_noisy {
            return Err(Error::config(
                "cnrl and full_finetune need noisy contexts; enable flags.gen_noisy",
            ));
        }
        let mut model = self.model.clone();
        model.vocab_size = crate::corpus::SpecialToken::COUNT as usize + 1;
        model.validate()
    }

    /// Evaluation conditions: clean first, then each SNR in order.
    pub fn noise_conditions(&self) -> Vec<NoiseConfig> {
        let bank_seed = self.noise_bank_seed();
        let mut out = Vec::new();
        if self.noise.include_clean {
            out.push(NoiseConfig::clean());
        }
        out.extend(self.noise.snr_db.iter().map(|&s| NoiseConfig::at_snr(s, bank_seed)));
        out
    }

    pub fn noise_bank_seed(&self) -> u64 {
        crate::seed::derive_seed(self.seed, "noise_bank", 0)
    }

    /// SHA-256 of the configuration with output paths blanked, so moving a
    /// run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths {
            corpus: PathBuf::new(),
            checkpoints: PathBuf::new(),
            reports: PathBuf::new(),
        };
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"n_dialogs": 3}}"#).is_err());
        assert_eq!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed, 3);
    }

    #[test]
    fn cnrl_without_noisy_generation_is_a_config_error() {
        let mut c = RunConfig::default();
        c.flags.gen_noisy = false;
        assert!(c.validate().is_err());
        c.flags.cnrl = false;
        c.flags.full_finetune = false;
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths = Paths::under(Path::new("/elsewhere"));
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
