//! Deterministic stand-in for text-to-speech.
//!
//! Every normalized word owns a fixed base prototype of 2-6 frames derived
//! from the word itself. A voice perturbs the prototype with a fixed
//! per-(word, voice) offset; each rendering adds seeded Gaussian jitter.
//! Words listed as confusable share most of their base prototype, which is
//! what makes dialogue context useful when the signal is degraded.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureSequence, DEFAULT_FEATURE_DIM, DEFAULT_FRAME_RATE_HZ};
use crate::error::{Error, Result};
use crate::seed::{self, string_id};
use crate::textnorm::normalize;

pub const VOICE_COUNT: usize = 4;

#[derive(Debug, Clone)]
pub struct SpeechSynthesizer {
    pub dim: usize,
    pub frame_rate_hz: f32,
    /// Weight of the voice-specific offset relative to the word prototype.
    pub voice_spread: f32,
    /// Standard deviation of per-rendering jitter.
    pub jitter: f32,
    /// Cosine similarity between the base prototypes of confusable words.
    pub confusable_similarity: f32,
    /// word -> partner whose prototype it is derived from.
    twin_of: BTreeMap<String, String>,
}

impl Default for SpeechSynthesizer {
    fn default() -> Self {
        SpeechSynthesizer {
            dim: DEFAULT_FEATURE_DIM,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            voice_spread: 0.4,
            jitter: 0.15,
            confusable_similarity: 0.9,
            twin_of: BTreeMap::new(),
        }
    }
}

fn gaussian_vec(seed: u64, component: &str, n: usize) -> Vec<f32> {
    let mut rng = seed::rng(seed, component, 0);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl SpeechSynthesizer {
    pub fn with_confusable_pairs(mut self, pairs: &[(String, String)]) -> Self {
        for (a, b) in pairs {
            // the lexicographically larger word derives from the smaller
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            self.twin_of.insert(hi.clone(), lo.clone());
        }
        self
    }

    /// Frames per word, in 2..=6, a pure function of the word (shared by
    /// confusable partners).
    pub fn word_length(&self, word: &str) -> usize {
        let anchor = self.twin_of.get(word).map(String::as_str).unwrap_or(word);
        2 + (string_id(anchor) % 5) as usize
    }

    fn base_prototype(&self, word: &str) -> Vec<f32> {
        let n = self.word_length(word) * self.dim;
        let own = gaussian_vec(string_id(word), "word_prototype", n);
        match self.twin_of.get(word) {
            None => own,
            Some(anchor) => {
                let c = self.confusable_similarity;
                let s = (1.0 - c * c).sqrt();
                gaussian_vec(string_id(anchor), "word_prototype", n)
                    .iter()
                    .zip(&own)
                    .map(|(a, o)| c * a + s * o)
                    .collect()
            }
        }
    }

    /// Noise-free template of `word` spoken by `voice`.
    pub fn prototype(&self, word: &str, voice: usize) -> Vec<f32> {
        let base = self.base_prototype(word);
        let offset = gaussian_vec(
            string_id(word) ^ (voice as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            "voice_offset",
            base.len(),
        );
        let beta = self.voice_spread;
        let norm = (1.0 + beta * beta).sqrt();
        base.iter()
            .zip(&offset)
            .map(|(b, o)| (b + beta * o) / norm)
            .collect()
    }

    pub fn synthesize(&self, text: &str, voice: usize, seed: u64) -> Result<FeatureSequence> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Err(Error::invalid("cannot synthesize empty text"));
        }
        if voice >= VOICE_COUNT {
            return Err(Error::invalid(format!(
                "voice {voice} outside 0..{VOICE_COUNT}"
            )));
        }
        let mut frames = Vec::new();
        for word in norm.split_whitespace() {
            frames.extend(self.prototype(word, voice));
        }
        let mut rng = seed::rng(seed, "speech_jitter", string_id(&norm) ^ voice as u64);
        for v in &mut frames {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v += self.jitter * z;
        }
        FeatureSequence::new(frames, self.dim, self.frame_rate_hz)
    }
}

/// `n` noise clips of varied character: temporally correlated colored noise
/// with a random spectral tilt, and on/off tone bursts.
pub fn generate_noise_bank(n: usize, dim: usize, frame_rate_hz: f32, seed: u64) -> Vec<FeatureSequence> {
    (0..n)
        .map(|i| noise_clip(dim, frame_rate_hz, seed, i as u64))
        .collect()
}

fn noise_clip(dim: usize, frame_rate_hz: f32, seed: u64, index: u64) -> FeatureSequence {
    let mut rng = seed::rng(seed, "noise_clip", index);
    let len = rng.random_range(50..=300);
    let mut frames = vec![0f32; len * dim];
    if rng.random_bool(0.7) {
        let rho: f32 = rng.random_range(0.0..0.95);
        let tilt: f32 = rng.random_range(-2.0..2.0);
        let gains: Vec<f32> = (0..dim)
            .map(|j| (tilt * j as f32 / dim as f32).exp())
            .collect();
        let innov = (1.0 - rho * rho).sqrt();
        let mut state = vec![0f32; dim];
        for t in 0..len {
            for j in 0..dim {
                let z: f32 = StandardNormal.sample(&mut rng);
                state[j] = rho * state[j] + innov * z;
                frames[t * dim + j] = gains[j] * state[j];
            }
        }
    } else {
        let pattern: Vec<f32> = (0..dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let period = rng.random_range(5..40);
        let duty: f32 = rng.random_range(0.2..0.8);
        for t in 0..len {
            let on = ((t % period) as f32) < duty * period as f32;
            for j in 0..dim {
                let z: f32 = StandardNormal.sample(&mut rng);
                frames[t * dim + j] = if on { pattern[j] } else { 0.0 } + 0.1 * z;
            }
        }
    }
    FeatureSequence::new(frames, dim, frame_rate_hz).expect("finite noise")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn synthesis_is_deterministic() {
        let s = SpeechSynthesizer::default();
        let a = s.synthesize("book a table", 1, 5).unwrap();
        let b = s.synthesize("book a table", 1, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, s.synthesize("book a table", 1, 6).unwrap());
    }

    #[test]
    fn frame_count_sums_word_lengths() {
        let s = SpeechSynthesizer::default();
        let text = "i need a cheap hotel";
        let expect: usize = text.split(' ').map(|w| s.word_length(w)).sum();
        assert_eq!(s.synthesize(text, 0, 0).unwrap().frame_count(), expect);
        assert!(text.split(' ').all(|w| (2..=6).contains(&s.word_length(w))));
    }

    #[test]
    fn voices_differ_more_than_renderings() {
        let s = SpeechSynthesizer::default();
        let p0 = s.prototype("hello", 0);
        let within = cosine(
            s.synthesize("hello", 0, 1).unwrap().as_slice(),
            s.synthesize("hello", 0, 2).unwrap().as_slice(),
        );
        for v in 1..VOICE_COUNT {
            let across = cosine(&p0, &s.prototype("hello", v));
            assert!(across < within, "voice {v}: {across} vs {within}");
            assert!(across > 0.5);
        }
    }

    #[test]
    fn confusable_words_share_length_and_shape() {
        let pairs = vec![("monday".to_string(), "sunday".to_string())];
        let s = SpeechSynthesizer::default().with_confusable_pairs(&pairs);
        assert_eq!(s.word_length("monday"), s.word_length("sunday"));
        let c = cosine(&s.prototype("monday", 0), &s.prototype("sunday", 0));
        assert!(c > 0.6, "{c}");
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(SpeechSynthesizer::default().synthesize(" !", 0, 0).is_err());
        assert!(SpeechSynthesizer::default().synthesize("hi", 9, 0).is_err());
    }

    #[test]
    fn noise_bank_shape_and_determinism() {
        let a = generate_noise_bank(2000, 32, 50.0, 3);
        assert_eq!(a.len(), 2000);
        let b = generate_noise_bank(20, 32, 50.0, 3);
        assert_eq!(&a[..20], &b[..]);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|c| c.as_slice().iter().all(|v| v.is_finite())));
    }
}
