use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ctxasr::audio::SpeechSynthesizer;
use ctxasr::corpus::{assemble_context, generate_synthetic_dialogues, ground_truth_transcripts, GenerationConfig, Vocab};
use ctxasr::model::{CaAsr, Dropout, ModelConfig};
use ctxasr::seed;
use ctxasr::tensor::{Graph, Mat};
use ctxasr::textnorm::{corpus_counts, normalize};
use rand::Rng;

fn random_mat(rows: usize, cols: usize, s: u64) -> Mat<f32> {
    let mut rng = seed::rng(s, "bench", 0);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn matmul(c: &mut Criterion) {
    let a = random_mat(256, 128, 1);
    let b = random_mat(128, 512, 2);
    c.bench_function("matmul_256x128x512", |bench| bench.iter(|| black_box(a.matmul(&b, false))));
}

struct Batch {
    model: CaAsr,
    feats: Vec<ctxasr::audio::FeatureSequence>,
    ctxs: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
}

fn batch(n: usize) -> Batch {
    let gen = GenerationConfig {
        n_dialogues: 8,
        ..Default::default()
    };
    let dialogues = generate_synthetic_dialogues(&gen).unwrap();
    let vocab = Vocab::from_dialogues(&dialogues);
    let synth = SpeechSynthesizer::default();
    let mut out = Batch {
        model: CaAsr::new(
            ModelConfig {
                vocab_size: vocab.len(),
                ..Default::default()
            },
            0,
        )
        .unwrap(),
        feats: Vec::new(),
        ctxs: Vec::new(),
        targets: Vec::new(),
    };
    'outer: for d in &dialogues {
        let gt = ground_truth_transcripts(d);
        for t in &d.turns {
            out.feats.push(synth.synthesize(&t.user_text, 0, 1).unwrap());
            out.ctxs.push(assemble_context(d, t.index, &gt).unwrap().encode(&vocab, 1024).token_ids);
            out.targets.push(vocab.tokenize(&t.user_text));
            if out.feats.len() == n {
                break 'outer;
            }
        }
    }
    out
}

fn training_step(c: &mut Criterion) {
    let b = batch(16);
    let f: Vec<_> = b.feats.iter().collect();
    let x: Vec<&[u32]> = b.ctxs.iter().map(Vec::as_slice).collect();
    let t: Vec<&[u32]> = b.targets.iter().map(Vec::as_slice).collect();
    c.bench_function("asr_forward_backward_batch16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(true);
            let loss = b.model.asr_loss(&mut g, &f, &x, &t, &mut Dropout::off()).unwrap();
            g.backward(loss);
            black_box(g.scalar(loss))
        })
    });
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    group.bench_function("greedy_transcribe_batch16", |bench| {
        bench.iter(|| black_box(b.model.transcribe_batch(&f, &x).unwrap()))
    });
    group.finish();
}

fn wer(c: &mut Criterion) {
    let gen = GenerationConfig {
        n_dialogues: 200,
        ..Default::default()
    };
    let texts: Vec<String> = generate_synthetic_dialogues(&gen)
        .unwrap()
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| normalize(&t.user_text)))
        .collect();
    let pairs: Vec<(&str, &str)> = texts.iter().zip(texts.iter().skip(1)).map(|(a, b)| (a.as_str(), b.as_str())).collect();
    c.bench_function("corpus_wer_1000_pairs", |bench| {
        bench.iter(|| black_box(corpus_counts(&pairs[..1000.min(pairs.len())]).unwrap()))
    });
}

criterion_group!(benches, matmul, training_step, wer);
criterion_main!(benches);
