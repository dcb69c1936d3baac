use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub snr_db: f64,
    pub noise_bank_seed: u64,
    pub enabled: bool,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        NoiseConfig {
            snr_db: f64::INFINITY,
            noise_bank_seed: 0,
            enabled: false,
        }
    }

    pub fn at_snr(snr_db: f64, noise_bank_seed: u64) -> Self {
        NoiseConfig {
            snr_db,
            noise_bank_seed,
            enabled: true,
        }
    }

    /// Short label used in reports: `no_noise`, `snr_20`, `snr_0`, ...
    pub fn label(&self) -> String {
        if !self.enabled {
            "no_noise".to_string()
        } else if self.snr_db.fract() == 0.0 {
            format!("snr_{}", self.snr_db as i64)
        } else {
            format!("snr_{}", self.snr_db)
        }
    }
}

pub fn rms(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let sum: f64 = values.iter().map(|&v| (v as f64) * (v as f64)).sum();
    (sum / values.len() as f64).sqrt()
}

/// Noise clip aligned to `n_frames`: a contiguous crop when the clip is long
/// enough, otherwise the clip tiled circularly. `offset` picks the start.
fn fit_noise(noise: &FeatureSequence, n_frames: usize, offset: usize) -> Vec<f32> {
    let len = noise.frame_count();
    let mut out = Vec::with_capacity(n_frames * noise.dim());
    if len >= n_frames {
        let start = offset % (len - n_frames + 1);
        for i in 0..n_frames {
            out.extend_from_slice(noise.frame(start + i));
        }
    } else {
        let start = offset % len;
        for i in 0..n_frames {
            out.extend_from_slice(noise.frame((start + i) % len));
        }
    }
    out
}

/// `signal + alpha * noise'` with `alpha` chosen so the added component sits
/// exactly `snr_db` below the signal power.
pub fn mix_noise(
    signal: &FeatureSequence,
    noise: &FeatureSequence,
    snr_db: f64,
    offset: usize,
) -> Result<FeatureSequence> {
    if signal.dim() != noise.dim() {
        return Err(Error::Shape(format!(
            "signal width {} vs noise width {}",
            signal.dim(),
            noise.dim()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("non-finite SNR {snr_db}")));
    }
    let fitted = fit_noise(noise, signal.frame_count(), offset);
    let p_signal = rms(signal.as_slice());
    let p_noise = rms(&fitted);
    if p_signal == 0.0 {
        return Err(Error::invalid("zero-power signal: SNR undefined"));
    }
    if p_noise == 0.0 {
        return Err(Error::invalid("zero-power noise: SNR undefined"));
    }
    let alpha = p_signal / (p_noise * 10f64.powf(snr_db / 20.0));
    let mixed = signal
        .as_slice()
        .iter()
        .zip(&fitted)
        .map(|(&s, &n)| (s as f64 + alpha * n as f64) as f32)
        .collect();
    FeatureSequence::new(mixed, signal.dim(), signal.frame_rate_hz)
}

/// SNR of `mixed - signal` relative to `signal`, in dB.
pub fn measured_snr_db(signal: &FeatureSequence, mixed: &FeatureSequence) -> f64 {
    let diff: Vec<f32> = mixed
        .as_slice()
        .iter()
        .zip(signal.as_slice())
        .map(|(m, s)| m - s)
        .collect();
    20.0 * (rms(signal.as_slice()) / rms(&diff)).log10()
}

/// Apply `cfg` with a clip drawn from `bank` by `rng`; identity when noise is
/// disabled.
pub fn apply_noise<R: Rng>(
    signal: &FeatureSequence,
    cfg: &NoiseConfig,
    bank: &[FeatureSequence],
    rng: &mut R,
) -> Result<FeatureSequence> {
    if !cfg.enabled {
        return Ok(signal.clone());
    }
    if bank.is_empty() {
        return Err(Error::precondition("noise bank is empty"));
    }
    let clip = &bank[rng.random_range(0..bank.len())];
    let offset = rng.random_range(0..clip.frame_count().max(1));
    mix_noise(signal, clip, cfg.snr_db, offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(vals: Vec<f32>, d: usize) -> FeatureSequence {
        FeatureSequence::new(vals, d, 50.0).unwrap()
    }

    #[test]
    fn zero_db_means_equal_power() {
        let s = seq((0..64).map(|i| (i as f32 * 0.37).sin()).collect(), 4);
        let n = seq((0..40).map(|i| (i as f32 * 1.3).cos() * 3.0).collect(), 4);
        let m = mix_noise(&s, &n, 0.0, 3).unwrap();
        let diff: Vec<f32> = m.as_slice().iter().zip(s.as_slice()).map(|(a, b)| a - b).collect();
        assert!((rms(&diff) - rms(s.as_slice())).abs() < 1e-5);
    }

    #[test]
    fn closed_form_scale_at_20_db() {
        // rms 0.1 each: alpha = 0.1 / (0.1 * 10) = 0.1
        let s = seq(vec![0.1, -0.1, 0.1, -0.1], 2);
        let n = seq(vec![0.1, 0.1, -0.1, -0.1], 2);
        let m = mix_noise(&s, &n, 20.0, 0).unwrap();
        for ((mv, sv), nv) in m.as_slice().iter().zip(s.as_slice()).zip(n.as_slice()) {
            assert!((mv - (sv + 0.1 * nv)).abs() < 1e-7);
        }
        assert!((measured_snr_db(&s, &m) - 20.0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_power_is_rejected() {
        let s = FeatureSequence::zeros(5, 2, 50.0);
        let n = seq(vec![1.0; 10], 2);
        assert!(mix_noise(&s, &n, 20.0, 0).is_err());
        assert!(mix_noise(&n, &s, 20.0, 0).is_err());
    }

    #[test]
    fn disabled_noise_is_identity() {
        let s = seq(vec![1.0, 2.0], 2);
        let mut rng = crate::seed::rng(0, "t", 0);
        let out = apply_noise(&s, &NoiseConfig::clean(), &[], &mut rng).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn short_noise_tiles_long_noise_crops() {
        let n = seq((0..6).map(|i| i as f32).collect(), 1);
        assert_eq!(fit_noise(&n, 8, 4), vec![4.0, 5.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(fit_noise(&n, 3, 2), vec![2.0, 3.0, 4.0]);
        assert_eq!(fit_noise(&n, 3, 5), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn labels() {
        assert_eq!(NoiseConfig::clean().label(), "no_noise");
        assert_eq!(NoiseConfig::at_snr(20.0, 0).label(), "snr_20");
        assert_eq!(NoiseConfig::at_snr(-5.0, 0).label(), "snr_-5");
    }
}
