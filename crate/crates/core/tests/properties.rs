use proptest::prelude::*;

use ctxasr::audio::{mask_audio, measured_snr_db, mix_noise, FeatureSequence, MaskConfig, SpeechSynthesizer};
use ctxasr::corpus::{
    assemble_context, generate_synthetic_dialogues, ground_truth_transcripts, GenerationConfig, Role, SlotCategory,
    Vocab, Vocabulary,
};
use ctxasr::model::{CaAsr, HiddenSeq, ModelConfig};
use ctxasr::seed;
use ctxasr::tensor::Mat;
use ctxasr::textnorm::{normalize, wer, wer_counts};
use ctxasr::training::{build_cnrl_set, CnrlVariant, NoisyContextPair, WordDropConfig};

const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..10).prop_map(|w| w.join(" "))
}

fn features(frames: usize, dim: usize, seed_: u64) -> FeatureSequence {
    let mut rng = seed::rng(seed_, "props", 0);
    let v = (0..frames * dim).map(|_| rand::Rng::random_range(&mut rng, -2.0f32..2.0)).collect();
    FeatureSequence::new(v, dim, 50.0).unwrap()
}

proptest! {
    #[test]
    fn wer_of_identical_strings_is_zero(r in sentence()) {
        prop_assume!(!r.is_empty());
        prop_assert_eq!(wer(&r, &r), 0.0);
    }

    #[test]
    fn wer_is_bounded_by_lengths(r in sentence(), h in sentence()) {
        prop_assume!(!r.is_empty());
        let c = wer_counts(&r, &h);
        let (nr, nh) = (r.split_whitespace().count(), h.split_whitespace().count());
        prop_assert_eq!(c.ref_words, nr);
        prop_assert!(c.errors() >= nr.abs_diff(nh));
        prop_assert!(c.errors() <= nr.max(nh));
        prop_assert!(wer(&r, &h) <= (nr + nh) as f64 / nr as f64);
        // Hypothesis words are either matched, substituted or inserted.
        prop_assert_eq!(nr - c.deletions + c.insertions, nh);
    }

    #[test]
    fn normalization_is_idempotent(s in "[A-Za-z0-9 ,.?!'\u{2019}-]{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn mixing_hits_the_requested_snr(
        frames in 5usize..80,
        noise_frames in 1usize..40,
        dim in 1usize..6,
        snr in -10.0f64..30.0,
        offset in 0usize..100,
        s in any::<u64>(),
    ) {
        let signal = features(frames, dim, s);
        let noise = features(noise_frames, dim, s ^ 1);
        let mixed = mix_noise(&signal, &noise, snr, offset).unwrap();
        prop_assert_eq!(mixed.frame_count(), frames);
        prop_assert!((measured_snr_db(&signal, &mixed) - snr).abs() < 0.05);
    }

    #[test]
    fn masking_only_zeroes_whole_chunks(frames in 1usize..400, fraction in 0.05f64..1.0, s in any::<u64>()) {
        let x = features(frames, 3, s);
        let cfg = MaskConfig { select_prob: 1.0, mask_fraction: fraction, chunk_seconds: 0.2 };
        let (y, report) = mask_audio(&x, &cfg, &mut seed::rng(s, "mask", 0));
        let chunk = cfg.chunk_frames(50.0);
        prop_assert!(report.selected);
        prop_assert!(!report.chunks.is_empty());
        for f in 0..frames {
            if report.chunks.contains(&(f / chunk)) {
                prop_assert!(y.frame(f).iter().all(|&v| v == 0.0));
            } else {
                let same = y.frame(f).iter().zip(x.frame(f)).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }

    #[test]
    fn synthesis_is_a_pure_function(i in 0usize..30, voice in 0usize..4, s in any::<u64>()) {
        let text = ["i want to go to ely", "at eleven please", "yes that is right"][i % 3];
        let synth = SpeechSynthesizer::default();
        let a = synth.synthesize(text, voice, s).unwrap();
        let b = synth.synthesize(text, voice, s).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }
}

fn tiny_model() -> CaAsr {
    let cfg = ModelConfig {
        hidden_dim: 8,
        ffn_dim: 16,
        encoder_layers: 1,
        encoder_heads: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        vocab_size: 12,
        feature_dim: 4,
        ..Default::default()
    };
    CaAsr::new(cfg, 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fusion_concatenates_and_rectifies(ts in 1usize..12, tc in 1usize..12, s in any::<u64>()) {
        let model = tiny_model();
        let mut rng = seed::rng(s, "fuse", 0);
        let mut hidden = |n: usize| {
            let v = (0..n * 8).map(|_| rand::Rng::random_range(&mut rng, -3.0f32..3.0)).collect();
            HiddenSeq::new(Mat::from_vec(n, 8, v)).unwrap()
        };
        let (a, b) = (hidden(ts), hidden(tc));
        let fused = model.fuse_hidden(&a, &b).unwrap();
        prop_assert_eq!(fused.values.rows(), ts + tc);
        prop_assert!(fused.values.as_slice().iter().all(|&v| v >= 0.0));
    }
}

fn noisy_pairs(n_dialogues: usize) -> (Vec<NoisyContextPair>, Vocab) {
    let dialogues = generate_synthetic_dialogues(&GenerationConfig {
        n_dialogues,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let vocab = Vocab::from_dialogues(&dialogues);
    let mut pairs = Vec::new();
    for d in &dialogues {
        let gt = ground_truth_transcripts(d);
        // Every third user turn loses its last word; others are exact.
        let hyp = gt
            .iter()
            .map(|(&t, text)| {
                let mut words: Vec<&str> = text.split_whitespace().collect();
                if t % 3 == 0 && words.len() > 1 {
                    words.pop();
                }
                (t, words.join(" "))
            })
            .collect();
        for t in 2..=d.turns.len() {
            let noisy = assemble_context(d, t, &hyp).unwrap();
            let clean = assemble_context(d, t, &gt).unwrap();
            pairs.push(NoisyContextPair::new(d.id.clone(), t, noisy, clean).unwrap());
        }
    }
    (pairs, vocab)
}

#[test]
fn cnrl_sets_keep_the_clean_structure() {
    let (pairs, vocab) = noisy_pairs(20);
    let cfg = WordDropConfig::default();
    for variant in [CnrlVariant::S1, CnrlVariant::S2, CnrlVariant::S3, CnrlVariant::S4] {
        let set = build_cnrl_set(&pairs, variant, &cfg, 3, &vocab, 1024).unwrap();
        assert_eq!(set.len(), pairs.len());
        for (out, src) in set.iter().zip(&pairs) {
            assert!(out.noisy_context.same_structure(&src.clean_context), "{variant}");
            assert_eq!(out.clean_context.entries, src.clean_context.entries);
            assert!(!out.noisy_context.token_ids.is_empty());
            for ((role, clean), (_, noisy)) in out.clean_context.entries.iter().zip(&out.noisy_context.entries) {
                if *role == Role::Agent {
                    assert_eq!(clean, noisy, "{variant}: agent text changed");
                }
            }
        }
    }
}

#[test]
fn s2_corrupts_only_the_last_user_entry() {
    let (pairs, vocab) = noisy_pairs(20);
    let set = build_cnrl_set(&pairs, CnrlVariant::S2, &WordDropConfig::default(), 3, &vocab, 1024).unwrap();
    for (out, src) in set.iter().zip(&pairs) {
        let last = src.clean_context.entries.iter().rposition(|(r, _)| *r == Role::User).unwrap();
        for (i, (a, b)) in out.noisy_context.entries.iter().zip(&src.clean_context.entries).enumerate() {
            if i == last {
                assert_eq!(a, &src.noisy_context.entries[i]);
            } else {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn agent_questions_determine_the_next_answer_category() {
    let vocabulary = Vocabulary::default();
    let dialogues = generate_synthetic_dialogues(&GenerationConfig {
        n_dialogues: 200,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let asks = |text: &str, cat: SlotCategory| {
        let key = match cat {
            SlotCategory::Food => "food",
            SlotCategory::Area => "area",
            SlotCategory::Price => "price range",
            SlotCategory::Stars => "stars",
            SlotCategory::People => "people",
            SlotCategory::Day => "day",
            SlotCategory::Time => "time",
            SlotCategory::Nights => "nights",
            SlotCategory::Destination => "travelling to",
            SlotCategory::Departure => "leaving from",
        };
        let last = text.rsplit(" . ").next().unwrap_or(text);
        last.ends_with('?') && last.contains(key)
    };
    let (mut asked, mut answered) = (0, 0);
    for d in &dialogues {
        // The closing turn ends the dialogue whatever was asked.
        let body = &d.turns[..d.turns.len() - 1];
        for pair in body.windows(2) {
            let question = pair[0].agent_text.as_str();
            let cats: Vec<SlotCategory> =
                vocabulary.values.keys().copied().filter(|&c| asks(question, c)).collect();
            let [cat] = cats[..] else { continue };
            asked += 1;
            let reply: Vec<&str> = pair[1].user_text.split_whitespace().collect();
            let hit = vocabulary.values[&cat]
                .iter()
                .any(|v| reply.windows(v.split_whitespace().count()).any(|w| w.join(" ") == *v));
            answered += hit as usize;
        }
    }
    assert!(asked > 200, "only {asked} slot questions");
    assert!(answered as f64 >= 0.95 * asked as f64, "{answered}/{asked} answers carry the asked slot");
}
