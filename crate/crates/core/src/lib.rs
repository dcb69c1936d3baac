//! Context-aware dialogue speech recognition with context-noise
//! representation learning.
//!
//! The crate covers the whole pipeline at desk scale: synthetic dialogue and
//! speech-feature corpora, text normalization and WER, a compact
//! encoder-decoder recognizer that conditions on dialogue history, the
//! three training stages (decoder pre-training, ASR fine-tuning with audio
//! masking, and contrastive fine-tuning of the context encoder on noisy
//! histories), and turn-by-turn evaluation under noise.

pub mod audio;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod run;
pub mod seed;
pub mod tensor;
pub mod textnorm;
pub mod training;

pub use error::{Error, Result};
