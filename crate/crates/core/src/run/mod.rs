//! Stage orchestration: configuration, persisted artifacts with hashed
//! manifests, and the end-to-end pipeline.

mod artifacts;
mod config;
mod pipeline;
mod stages;

pub use artifacts::{sha256_hex, ArtifactRef, Layout, StageManifest, Staging};
pub use config::{
    DataConfig, DecoderInitKind, Flags, NoiseSettings, Paths, RunConfig, ENV_CHECKPOINT_DIR, ENV_CORPUS_DIR,
    ENV_REPORT_DIR,
};
pub use pipeline::{labels, run_pipeline, ModelRow, NoisySummary, PipelineReport, Selection, REPORT_PATH};
pub use stages::{
    build_cnrl, cnrl, cnrl_checkpoint, cnrl_set_path, eval_seed, evaluate_checkpoint, finetune, full_finetune_s4,
    gen_data, gen_noisy, load_corpus, noise_bank, pairs_from_report, pretrain, AsrKind, Corpus, Splits,
    FULL_FINETUNE_CHECKPOINT, NOISY_PAIRS, PRETRAIN_CHECKPOINT,
};
