use std::path::Path;
use std::process::{Command, Output};

use ctxasr::audio::FeatureSequence;
use ctxasr::textnorm::normalize;
use serde_json::Value;

fn ctxasr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxasr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn ramp(frames: usize) -> FeatureSequence {
    let v = (0..frames * 32).map(|i| ((i % 17) as f32 - 8.0) / 4.0).collect();
    FeatureSequence::new(v, 32, 50.0).unwrap()
}

#[test]
fn wer_reports_counts_as_json() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ref.txt"), "i want to go to ely\nat six please\n").unwrap();
    std::fs::write(dir.path().join("hyp.txt"), "I want to go to Ely.\nat six pm please\n").unwrap();
    let v = stdout_json(&ctxasr(&["wer", "--ref", "ref.txt", "--hyp", "hyp.txt"], dir.path()));
    assert_eq!(v["N"], 9);
    assert_eq!(v["S"], 0);
    assert_eq!(v["D"], 0);
    assert_eq!(v["I"], 1);
    assert!((v["wer"].as_f64().unwrap() - 1.0 / 9.0).abs() < 1e-12);
}

#[test]
fn mismatched_line_counts_fail() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ref.txt"), "a b\nc\n").unwrap();
    std::fs::write(dir.path().join("hyp.txt"), "a b\n").unwrap();
    let out = ctxasr(&["wer", "--ref", "ref.txt", "--hyp", "hyp.txt"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"sed": 3}"#).unwrap();
    let out = ctxasr(&["--config", "bad.json", "config"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));

    std::fs::write(dir.path().join("folds.json"), r#"{"folds": 1}"#).unwrap();
    assert_eq!(ctxasr(&["--config", "folds.json", "config"], dir.path()).status.code(), Some(2));
    assert_eq!(ctxasr(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn stage_without_inputs_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxasr(&["pretrain"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn config_prints_overrides_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"folds": 4, "data": {"n_dialogues": 40}}"#).unwrap();
    let v = stdout_json(&ctxasr(&["--config", "c.json", "--seed", "99", "config"], dir.path()));
    assert_eq!(v["folds"], 4);
    assert_eq!(v["seed"], 99);
    assert_eq!(v["data"]["n_dialogues"], 40);
    assert_eq!(v["data"]["test_fraction"], 0.15);
    std::fs::write(dir.path().join("full.json"), serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(stdout_json(&ctxasr(&["--config", "full.json", "config"], dir.path())), v);
}

#[test]
fn mix_noise_reaches_the_requested_snr() {
    let dir = tempfile::tempdir().unwrap();
    ramp(120).save(&dir.path().join("in.caf")).unwrap();
    let args = ["mix-noise", "--input", "in.caf", "--output", "out.caf", "--snr", "5", "--key", "u1"];
    let v = stdout_json(&ctxasr(&args, dir.path()));
    assert!((v["measured_snr_db"].as_f64().unwrap() - 5.0).abs() < 0.05);
    let first = std::fs::read(dir.path().join("out.caf")).unwrap();
    stdout_json(&ctxasr(&args, dir.path()));
    assert_eq!(std::fs::read(dir.path().join("out.caf")).unwrap(), first);
    assert_eq!(FeatureSequence::load(&dir.path().join("out.caf")).unwrap().frame_count(), 120);
}

#[test]
fn mask_zeroes_the_reported_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let input = ramp(500);
    input.save(&dir.path().join("in.caf")).unwrap();
    let args = ["mask", "--input", "in.caf", "--output", "out.caf", "--p", "1", "--frac", "0.2"];
    let v = stdout_json(&ctxasr(&args, dir.path()));
    let chunks: Vec<usize> = serde_json::from_value(v["chunks"].clone()).unwrap();
    assert_eq!(v["total_chunks"], 10);
    assert_eq!(chunks.len(), 2);
    let out = FeatureSequence::load(&dir.path().join("out.caf")).unwrap();
    for f in 0..500 {
        if chunks.contains(&(f / 50)) {
            assert!(out.frame(f).iter().all(|&x| x == 0.0));
        } else {
            assert_eq!(out.frame(f), input.frame(f));
        }
    }
}

#[test]
fn corrupt_text_only_deletes_words() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = (0..20).map(|i| format!("i would like a table for {i} people at seven please")).collect();
    std::fs::write(dir.path().join("in.txt"), lines.join("\n")).unwrap();
    let args = ["corrupt-text", "--input", "in.txt", "--output", "out.txt", "--target-wer", "0.1"];
    let out = ctxasr(&args, dir.path());
    assert!(out.status.success());
    let stats: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    let deletions = stats["deletions"].as_u64().unwrap();
    let total: u64 = lines.iter().map(|l| l.split_whitespace().count() as u64).sum();
    assert_eq!(deletions, (0.1 * total as f64).round() as u64);
    let corrupted = std::fs::read_to_string(dir.path().join("out.txt")).unwrap();
    let kept: usize = corrupted.lines().map(|l| l.split_whitespace().count()).sum();
    assert_eq!(kept as u64 + deletions, total);
    for (a, b) in corrupted.lines().zip(&lines) {
        let b = normalize(b);
        let mut words = b.split_whitespace();
        assert!(a.split_whitespace().all(|w| words.any(|x| x == w)), "{a:?} is not a subsequence of {b:?}");
    }
}
