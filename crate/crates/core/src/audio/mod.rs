//! Feature-domain speech stand-in: synthetic speech features, a noise bank,
//! SNR-calibrated mixing and chunked training-time masking.

mod features;
mod mask;
mod mix;
mod synth;

pub use features::{FeatureSequence, DEFAULT_FEATURE_DIM, DEFAULT_FRAME_RATE_HZ};
pub use mask::{mask_audio, MaskConfig, MaskReport};
pub use mix::{apply_noise, measured_snr_db, mix_noise, rms, NoiseConfig};
pub use synth::{generate_noise_bank, SpeechSynthesizer, VOICE_COUNT};
