use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ctxasr::audio::{measured_snr_db, NoiseConfig};
use ctxasr::eval::{transcribe_dialogue, transcribe_dialogues, utterance_id, ContextMode, NoiseSpec};
use ctxasr::model::{Checkpoint, ModelConfig};
use ctxasr::run::{
    gen_data, labels, load_corpus, noise_bank, pretrain, run_pipeline, sha256_hex, AsrKind, Layout, Paths,
    PipelineReport, RunConfig, StageManifest,
};
use ctxasr::Error;

fn tiny(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        paths: Paths::under(root),
        ..Default::default()
    };
    cfg.data.n_dialogues = 30;
    cfg.data.extra_pretrain_dialogues = 10;
    cfg.data.turns_per_dialogue = (3, 5);
    cfg.data.dev_fraction = 0.15;
    cfg.data.test_fraction = 0.2;
    cfg.model = ModelConfig {
        hidden_dim: 16,
        ffn_dim: 32,
        encoder_layers: 1,
        encoder_heads: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        feature_dim: 8,
        ..Default::default()
    };
    for s in [
        &mut cfg.pretrain,
        &mut cfg.finetune,
        &mut cfg.fold_finetune,
        &mut cfg.cnrl,
        &mut cfg.full_finetune,
    ] {
        s.max_epochs = 2;
        s.batch_size = 16;
        s.warmup_steps = 0;
    }
    cfg.folds = 3;
    cfg.noise.bank_size = 8;
    cfg.max_noisy_wer = 1.0;
    cfg
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: RunConfig,
    report: PipelineReport,
}

fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = tiny(&root);
        let report = run_pipeline(&cfg).unwrap();
        Run {
            _dir: dir,
            root,
            cfg,
            report,
        }
    })
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn every_file_is_a_declared_stage_output() {
    let run = shared_run();
    let files = files_under(&run.root);
    let layout = Layout::new(&run.cfg.paths);
    let mut declared = BTreeSet::new();
    for (rel, _) in files.iter().filter(|(p, _)| p.components().any(|c| c.as_os_str() == "manifests")) {
        let m = StageManifest::load(&run.root.join(rel)).unwrap();
        assert_eq!(PathBuf::from(layout.manifest_path(&m.stage)), *rel);
        declared.insert(rel.clone());
        for out in &m.outputs {
            let bytes = std::fs::read(layout.resolve(&out.path).unwrap()).unwrap();
            assert_eq!(sha256_hex(&bytes), out.sha256, "{} changed after its stage", out.path);
            declared.insert(PathBuf::from(&out.path));
        }
    }
    for rel in files.keys() {
        assert!(rel.extension().is_none_or(|e| e != "partial"), "leftover {}", rel.display());
        assert!(declared.contains(rel), "{} is not listed by any manifest", rel.display());
    }
}

#[test]
fn report_lists_the_whole_grid() {
    let report = &shared_run().report;
    assert_eq!(report.conditions, ["no_noise", "snr_20", "snr_0"]);
    for label in [
        labels::BASE,
        labels::CNRL,
        labels::PRETRAIN,
        labels::BOTH,
        labels::SPEECH_ONLY,
        labels::BASE_GT,
        labels::PRETRAIN_GT,
        labels::FULL_FT_S4,
    ] {
        let row = report.row(label).unwrap_or_else(|| panic!("missing row {label}"));
        assert_eq!(row.wer.len(), 3);
        assert!(row.wer.values().all(|w| w.is_finite() && *w >= 0.0));
    }
    let noisy = report.noisy.as_ref().unwrap();
    assert_eq!(noisy.fold_wers.len(), 3);
    assert_eq!(noisy.set_pairs.len(), 4);
}

#[test]
fn held_out_transcripts_cover_each_training_utterance_once() {
    let run = shared_run();
    let corpus = load_corpus(&run.cfg).unwrap();
    let text = std::fs::read_to_string(run.root.join("corpus/noisy/transcripts.json")).unwrap();
    let transcripts: BTreeMap<String, String> = serde_json::from_str(&text).unwrap();
    let expected: BTreeSet<String> = corpus
        .train()
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| utterance_id(&d.id, t.index)).collect::<Vec<_>>())
        .collect();
    assert_eq!(transcripts.keys().cloned().collect::<BTreeSet<_>>(), expected);
    for fold in 0..3 {
        let held = corpus.splits.folds.held_out(fold);
        assert!(!held.is_empty());
        for other in fold + 1..3 {
            assert!(held.is_disjoint(&corpus.splits.folds.held_out(other)));
        }
    }
}

#[test]
fn rerun_reproduces_every_byte() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let again = run_pipeline(&tiny(dir.path())).unwrap();
    // Wall-clock epoch times are the only in-memory difference.
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&run.report).unwrap());
    let (a, b) = (files_under(&run.root), files_under(dir.path()));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs between runs", path.display());
    }
}

#[test]
fn later_turns_see_earlier_hypotheses() {
    let run = shared_run();
    let corpus = load_corpus(&run.cfg).unwrap();
    let ckpt = Checkpoint::load(&Layout::new(&run.cfg.paths).resolve(&AsrKind::Random.checkpoint()).unwrap()).unwrap();
    let test = corpus.test();
    let refs: Vec<_> = test.iter().collect();
    let batched = transcribe_dialogues(&ckpt.model, &ckpt.vocab, &refs, ContextMode::Autoregressive, None).unwrap();
    for (d, preds) in test.iter().zip(&batched) {
        assert_eq!(preds.len(), d.turns.len());
        for (k, p) in preds.iter().enumerate() {
            assert_eq!(p.turn_index, k + 1);
            let seen: Vec<&str> = p.context.user_texts().collect();
            let earlier: Vec<&str> = preds[..k].iter().map(|q| q.hypothesis.as_str()).collect();
            assert_eq!(seen, earlier);
        }
        // Batching across dialogues does not change any transcript.
        let alone = transcribe_dialogue(&ckpt.model, &ckpt.vocab, d, ContextMode::Autoregressive, None).unwrap();
        assert_eq!(&alone, preds);

        let gt = transcribe_dialogue(&ckpt.model, &ckpt.vocab, d, ContextMode::GroundTruth, None).unwrap();
        for p in &gt {
            let seen: Vec<&str> = p.context.user_texts().collect();
            let refs: Vec<&str> = d.turns[..p.turn_index - 1].iter().map(|t| t.user_text.as_str()).collect();
            assert_eq!(seen, refs);
        }
    }
}

#[test]
fn every_condition_adds_the_same_clip() {
    let run = shared_run();
    let corpus = load_corpus(&run.cfg).unwrap();
    let bank = noise_bank(&run.cfg);
    let seed = ctxasr::run::eval_seed(&run.cfg);
    let spec = |snr: f64| NoiseSpec {
        config: NoiseConfig::at_snr(snr, run.cfg.noise_bank_seed()),
        bank: &bank,
        seed,
    };
    let (hi, lo) = (spec(20.0), spec(0.0));
    for d in corpus.test().iter().take(3) {
        for t in &d.turns {
            let uid = utterance_id(&d.id, t.index);
            let clean = t.speech.as_ref().unwrap();
            let (a, b) = (hi.apply(clean, &uid).unwrap(), lo.apply(clean, &uid).unwrap());
            assert_eq!(hi.apply(clean, &uid).unwrap(), a);
            assert!((measured_snr_db(clean, &a) - 20.0).abs() < 0.05);
            assert!((measured_snr_db(clean, &b) - 0.0).abs() < 0.05);
            // Same clip and offset: the added components differ only in scale.
            for ((x, y), s) in a.as_slice().iter().zip(b.as_slice()).zip(clean.as_slice()) {
                let (na, nb) = ((x - s) as f64, (y - s) as f64);
                assert!((nb - 10.0 * na).abs() <= 1e-3 * (1.0 + nb.abs()), "{na} vs {nb}");
            }
        }
    }
}

#[test]
fn stages_refuse_to_run_before_their_inputs_exist() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(pretrain(&cfg), Err(Error::Precondition(_))));
    assert!(files_under(dir.path()).is_empty());
    gen_data(&cfg).unwrap();
    let before = files_under(dir.path());
    assert!(matches!(ctxasr::run::finetune(&cfg, AsrKind::Pretrained), Err(Error::Precondition(_))));
    assert!(matches!(ctxasr::run::build_cnrl(&cfg, ctxasr::training::CnrlVariant::S4), Err(Error::Precondition(_))));
    assert_eq!(files_under(dir.path()), before);
}
