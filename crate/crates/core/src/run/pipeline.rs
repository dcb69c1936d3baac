use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::artifacts::{ArtifactRef, Layout, StageManifest, Staging};
use super::config::RunConfig;
use super::stages::*;
use crate::eval::{compare_encodings, ContextMode, EncodingDiagnostics, MetricsReport};
use crate::model::Checkpoint;
use crate::training::{CnrlVariant, EpochLog, FilterReport};
use crate::{Error, Result};

/// One evaluated recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub label: String,
    pub checkpoint: String,
    pub context_mode: ContextMode,
    /// WER per condition label.
    pub wer: BTreeMap<String, f64>,
    /// WER pooled over every condition.
    pub pooled_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected_epoch: usize,
    pub selected_metric: f64,
    pub curve: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySummary {
    pub pairs: usize,
    pub fold_wers: Vec<f64>,
    pub transcript_wer: f64,
    pub filter: FilterReport,
    /// Pooled context WER of each CNRL training set.
    pub set_wer: BTreeMap<String, f64>,
    pub set_pairs: BTreeMap<String, usize>,
}

/// Everything a run produced, in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seed: u64,
    pub conditions: Vec<String>,
    pub models: Vec<ModelRow>,
    pub selection: BTreeMap<String, Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<NoisySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnrl_diagnostics: Option<EncodingDiagnostics>,
    /// Manifest of every stage, in execution order.
    pub manifests: Vec<ArtifactRef>,
}

impl PipelineReport {
    pub fn row(&self, label: &str) -> Option<&ModelRow> {
        self.models.iter().find(|r| r.label == label)
    }

    pub fn wer(&self, label: &str, condition: &str) -> Option<f64> {
        self.row(label).and_then(|r| r.wer.get(condition).copied())
    }
}

pub const REPORT_PATH: &str = "reports/report.json";

/// Row labels of the evaluation grid.
pub mod labels {
    pub const BASE: &str = "base";
    pub const CNRL: &str = "+cnrl";
    pub const PRETRAIN: &str = "+pretrain";
    pub const BOTH: &str = "+both";
    pub const SPEECH_ONLY: &str = "speech_only";
    pub const BASE_GT: &str = "base_ground_truth";
    pub const PRETRAIN_GT: &str = "+pretrain_ground_truth";
    pub const FULL_FT_S4: &str = "full_ft_s4";
}

/// Wrap stage failures with the stage name and the last good manifest.
/// Configuration errors pass through unchanged.
fn guard<T>(stage: &str, last: &[ArtifactRef], r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(_) => e,
        e => Error::Stage {
            stage: stage.to_string(),
            reason: format!(
                "{e}; last good manifest: {}",
                last.last().map_or("none".to_string(), |r| r.path.clone())
            ),
        },
    })
}

fn selection(m: &StageManifest) -> Selection {
    Selection {
        selected_epoch: m.selected_epoch.unwrap_or(0),
        selected_metric: m.selected_metric.unwrap_or(f64::NAN),
        curve: m.curve.clone(),
    }
}

fn slug(label: &str) -> String {
    label.trim_start_matches('+').to_string()
}

/// Run every stage in order and write the combined report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths);
    let mut manifests: Vec<ArtifactRef> = Vec::new();
    let mut selections = BTreeMap::new();
    let push = |m: &StageManifest, manifests: &mut Vec<ArtifactRef>| {
        manifests.push(m.self_ref.clone().expect("committed manifests carry their reference"));
    };

    let m = guard("gen-data", &manifests, gen_data(cfg))?;
    push(&m, &mut manifests);
    let m = guard("pretrain", &manifests, pretrain(cfg))?;
    push(&m, &mut manifests);
    selections.insert("pretrain".to_string(), selection(&m));

    let mut kinds = vec![AsrKind::Random, AsrKind::Pretrained];
    if cfg.flags.speech_only_baseline {
        kinds.push(AsrKind::SpeechOnly);
    }
    for kind in &kinds {
        let m = guard(&kind.stage(), &manifests, finetune(cfg, *kind))?;
        push(&m, &mut manifests);
        selections.insert(kind.stage(), selection(&m));
    }

    let mut noisy = None;
    if cfg.flags.gen_noisy {
        let m = guard("gen-noisy", &manifests, gen_noisy(cfg))?;
        push(&m, &mut manifests);
        let get = |k: &str| m.summary.get(k).cloned().unwrap_or_default();
        let mut summary = NoisySummary {
            pairs: serde_json::from_value(get("pairs")).unwrap_or(0),
            fold_wers: serde_json::from_value(get("fold_wers")).unwrap_or_default(),
            transcript_wer: serde_json::from_value(get("corpus_wer")).unwrap_or(f64::NAN),
            filter: FilterReport {
                total: 0,
                removed: 0,
                removed_fraction: 0.0,
            },
            set_wer: BTreeMap::new(),
            set_pairs: BTreeMap::new(),
        };
        for variant in [CnrlVariant::S1, CnrlVariant::S2, CnrlVariant::S3, CnrlVariant::S4] {
            let stage = format!("build-cnrl-{variant}");
            let m = guard(&stage, &manifests, build_cnrl(cfg, variant))?;
            push(&m, &mut manifests);
            if let Some(f) = m.summary.get("filter") {
                summary.filter = serde_json::from_value(f.clone())?;
            }
            let wer = m.summary.get("context_wer").and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
            let n = m.summary.get("pairs").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            summary.set_wer.insert(variant.to_string(), wer);
            summary.set_pairs.insert(variant.to_string(), n);
        }
        noisy = Some(summary);
    }

    let mut cnrl_bases = Vec::new();
    if cfg.flags.cnrl {
        for base in [AsrKind::Random, AsrKind::Pretrained] {
            let stage = format!("cnrl-{}", base.name());
            let m = guard(&stage, &manifests, cnrl(cfg, base))?;
            push(&m, &mut manifests);
            selections.insert(stage, selection(&m));
            cnrl_bases.push(base);
        }
    }
    if cfg.flags.full_finetune {
        let m = guard("full-finetune-s4", &manifests, full_finetune_s4(cfg))?;
        push(&m, &mut manifests);
        selections.insert("full-finetune-s4".to_string(), selection(&m));
    }

    let (eval_manifest, mut report) =
        guard("eval", &manifests, evaluate_grid(cfg, &layout, &cnrl_bases, manifests.clone()))?;
    report.selection = selections;
    report.noisy = noisy;
    report.manifests = manifests;
    report.manifests.push(eval_manifest.self_ref.clone().expect("committed"));

    let mut staging = Staging::new(&layout);
    let mut m = StageManifest::new("pipeline", &cfg.hash());
    m.inputs = report.manifests.clone();
    let written = staging.write_json(REPORT_PATH, &report).and_then(|_| staging.commit(m));
    guard("pipeline", &report.manifests, written)?;
    Ok(report)
}

/// Evaluate every recognizer of the grid on the test split and write one
/// metrics file and one per-turn CSV per row.
fn evaluate_grid(
    cfg: &RunConfig,
    layout: &Layout,
    cnrl_bases: &[AsrKind],
    inputs: Vec<ArtifactRef>,
) -> Result<(StageManifest, PipelineReport)> {
    let corpus = load_corpus(cfg)?;
    let bank = noise_bank(cfg);
    let mut grid: Vec<(&str, String, ContextMode)> = vec![
        (labels::BASE, AsrKind::Random.checkpoint(), ContextMode::Autoregressive),
        (labels::PRETRAIN, AsrKind::Pretrained.checkpoint(), ContextMode::Autoregressive),
    ];
    if cnrl_bases.contains(&AsrKind::Random) {
        grid.push((labels::CNRL, cnrl_checkpoint(AsrKind::Random), ContextMode::Autoregressive));
    }
    if cnrl_bases.contains(&AsrKind::Pretrained) {
        grid.push((labels::BOTH, cnrl_checkpoint(AsrKind::Pretrained), ContextMode::Autoregressive));
    }
    if cfg.flags.speech_only_baseline {
        grid.push((labels::SPEECH_ONLY, AsrKind::SpeechOnly.checkpoint(), ContextMode::None));
    }
    grid.push((labels::BASE_GT, AsrKind::Random.checkpoint(), ContextMode::GroundTruth));
    grid.push((labels::PRETRAIN_GT, AsrKind::Pretrained.checkpoint(), ContextMode::GroundTruth));
    if cfg.flags.full_finetune {
        grid.push((labels::FULL_FT_S4, FULL_FINETUNE_CHECKPOINT.to_string(), ContextMode::Autoregressive));
    }

    let mut staging = Staging::new(layout);
    let mut rows = Vec::new();
    let mut reports: BTreeMap<&str, MetricsReport> = BTreeMap::new();
    for (label, ckpt, mode) in &grid {
        let report = evaluate_checkpoint(cfg, &corpus, ckpt, label, *mode, &bank)?;
        let name = slug(label);
        staging.write(&format!("reports/eval_{name}.json"), report.to_json()?.as_bytes())?;
        staging.write(&format!("reports/eval_{name}.csv"), report.per_turn_csv().as_bytes())?;
        rows.push(ModelRow {
            label: label.to_string(),
            checkpoint: ckpt.clone(),
            context_mode: *mode,
            wer: report.wers(),
            pooled_wer: report.pooled_counts().rate(),
        });
        log::info!("{label}: {:?}", report.wers());
        reports.insert(label, report);
    }

    // Encoding diagnostics on test histories transcribed by the pre-trained
    // recognizer, compared before and after context-encoder fine-tuning.
    let mut diagnostics = None;
    if cnrl_bases.contains(&AsrKind::Pretrained) {
        let before = Checkpoint::load(&layout.resolve(&AsrKind::Pretrained.checkpoint())?)?;
        let after = Checkpoint::load(&layout.resolve(&cnrl_checkpoint(AsrKind::Pretrained))?)?;
        let pairs = pairs_from_report(
            &reports[labels::PRETRAIN],
            &corpus,
            before.model.config().max_context_tokens,
        )?;
        let d = compare_encodings(
            &before.model,
            &after.model,
            &pairs,
            cfg.cosine.pooling,
            crate::seed::derive_seed(cfg.seed, "diagnostics", 0),
        )?;
        log::info!(
            "encoding similarity {:.4} -> {:.4} over {} pairs",
            d.before.mean,
            d.after.mean,
            d.pairs
        );
        diagnostics = Some(d);
    }

    let report = PipelineReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        conditions: cfg.noise_conditions().iter().map(|c| c.label()).collect(),
        models: rows,
        selection: BTreeMap::new(),
        noisy: None,
        cnrl_diagnostics: diagnostics,
        manifests: Vec::new(),
    };
    let mut m = StageManifest::new("eval", &cfg.hash());
    m.inputs = inputs;
    m.note("rows", report.models.iter().map(|r| r.label.clone()).collect::<Vec<_>>());
    Ok((staging.commit(m)?, report))
}
