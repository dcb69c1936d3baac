use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Probability that a training sample is masked at all.
    pub select_prob: f64,
    /// Fraction of a selected sample's duration to mask.
    pub mask_fraction: f64,
    /// Length of the masking unit.
    pub chunk_seconds: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            select_prob: 0.10,
            mask_fraction: 0.20,
            chunk_seconds: 1.0,
        }
    }
}

impl MaskConfig {
    pub fn disabled() -> Self {
        MaskConfig {
            select_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.select_prob) {
            return Err(crate::Error::config(format!(
                "select_prob {} outside [0, 1]",
                self.select_prob
            )));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(crate::Error::config(format!(
                "mask_fraction {} outside (0, 1]",
                self.mask_fraction
            )));
        }
        if !(self.chunk_seconds > 0.0) {
            return Err(crate::Error::config("chunk_seconds must be positive"));
        }
        Ok(())
    }

    pub fn chunk_frames(&self, frame_rate_hz: f32) -> usize {
        ((self.chunk_seconds * frame_rate_hz as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskReport {
    pub selected: bool,
    pub total_chunks: usize,
    /// Masked chunk indices, ascending.
    pub chunks: Vec<usize>,
    pub masked_frames: usize,
}

/// Zero `max(1, round(mask_fraction * chunks))` distinct one-chunk spans of a
/// sample selected with probability `select_prob`.
pub fn mask_audio<R: Rng>(
    features: &FeatureSequence,
    cfg: &MaskConfig,
    rng: &mut R,
) -> (FeatureSequence, MaskReport) {
    let chunk = cfg.chunk_frames(features.frame_rate_hz);
    let total_chunks = features.frame_count().div_ceil(chunk);
    let mut report = MaskReport {
        total_chunks,
        ..Default::default()
    };
    if !rng.random_bool(cfg.select_prob.clamp(0.0, 1.0)) {
        return (features.clone(), report);
    }
    report.selected = true;
    let n_mask = ((cfg.mask_fraction * total_chunks as f64).round() as usize)
        .max(1)
        .min(total_chunks);
    let mut chunks = sample(rng, total_chunks, n_mask).into_vec();
    chunks.sort_unstable();

    let mut out = features.clone();
    for &c in &chunks {
        let end = ((c + 1) * chunk).min(features.frame_count());
        for f in c * chunk..end {
            out.frame_mut(f).fill(0.0);
            report.masked_frames += 1;
        }
    }
    report.chunks = chunks;
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn ones(frames: usize) -> FeatureSequence {
        FeatureSequence::new(vec![1.0; frames * 4], 4, 50.0).unwrap()
    }

    fn always() -> MaskConfig {
        MaskConfig {
            select_prob: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn ten_seconds_masks_two_chunks() {
        let f = ones(500);
        let (out, rep) = mask_audio(&f, &always(), &mut seed::rng(1, "m", 0));
        assert_eq!(rep.chunks.len(), 2);
        assert_eq!(rep.masked_frames, 100);
        let zero_frames = (0..500).filter(|&i| out.frame(i).iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_frames, 100);
        for &c in &rep.chunks {
            assert!((c * 50..(c + 1) * 50).all(|i| out.frame(i) == [0.0; 4]));
        }
    }

    #[test]
    fn three_seconds_rounds_to_one_chunk() {
        let (_, rep) = mask_audio(&ones(150), &always(), &mut seed::rng(1, "m", 0));
        assert_eq!(rep.total_chunks, 3);
        assert_eq!(rep.chunks.len(), 1);
    }

    #[test]
    fn short_clip_is_fully_masked_when_selected() {
        let (out, rep) = mask_audio(&ones(20), &always(), &mut seed::rng(1, "m", 0));
        assert_eq!(rep.masked_frames, 20);
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_probability_is_identity() {
        let f = FeatureSequence::new((0..400).map(|i| i as f32).collect(), 4, 50.0).unwrap();
        let mut rng = seed::rng(2, "m", 0);
        for _ in 0..200 {
            let (out, rep) = mask_audio(&f, &MaskConfig::disabled(), &mut rng);
            assert!(!rep.selected);
            assert_eq!(out, f);
        }
    }

    #[test]
    fn unmasked_frames_are_untouched() {
        let f = FeatureSequence::new((0..2000).map(|i| i as f32 + 1.0).collect(), 4, 50.0).unwrap();
        let (out, rep) = mask_audio(&f, &always(), &mut seed::rng(3, "m", 0));
        for i in 0..500 {
            let masked = rep.chunks.contains(&(i / 50));
            if masked {
                assert!(out.frame(i).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(out.frame(i), f.frame(i));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        assert!(MaskConfig { select_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(MaskConfig { mask_fraction: 0.0, ..Default::default() }.validate().is_err());
    }
}
