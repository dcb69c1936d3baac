//! The context-aware recognizer: speech encoder, context encoder, fusion
//! layer and autoregressive decoder, plus the cosine embedding objective.

mod checkpoint;
mod loss;
mod network;

use serde::{Deserialize, Serialize};

use crate::audio::DEFAULT_FEATURE_DIM;
use crate::corpus::DEFAULT_MAX_CONTEXT_TOKENS;
use crate::tensor::Mat;
use crate::{Error, Result};

pub use checkpoint::{file_digest, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use loss::{cosine_embedding_loss, cosine_embedding_loss_batch, cosine_similarity, pool_context_encoding};
pub use network::{CaAsr, Dropout, SeqBatch};

/// Parameter-name prefixes of the four sub-networks.
pub const SPEECH_ENCODER: &str = "speech_encoder.";
pub const CONTEXT_ENCODER: &str = "context_encoder.";
pub const FUSION: &str = "fusion.";
pub const DECODER: &str = "decoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Consecutive feature frames stacked by the speech front-end.
    pub frame_stride: usize,
    pub max_context_tokens: usize,
    /// Upper bound on generated tokens, EOS included.
    pub max_decode_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 128,
            ffn_dim: 512,
            encoder_layers: 2,
            encoder_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            vocab_size: 0,
            feature_dim: DEFAULT_FEATURE_DIM,
            frame_stride: 2,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            max_decode_len: 40,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("encoder_heads", self.encoder_heads),
            ("decoder_heads", self.decoder_heads),
            ("feature_dim", self.feature_dim),
            ("frame_stride", self.frame_stride),
            ("max_context_tokens", self.max_context_tokens),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::SpecialToken::COUNT as usize {
            return Err(Error::config("model.vocab_size must exceed the special tokens"));
        }
        for (name, heads) in [("encoder", self.encoder_heads), ("decoder", self.decoder_heads)] {
            if self.hidden_dim % heads != 0 {
                return Err(Error::config(format!(
                    "hidden_dim {} is not divisible by {name} heads {heads}",
                    self.hidden_dim
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Speech-encoder length for `n_frames` input frames.
    pub fn speech_length(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.frame_stride)
    }
}

/// A `T x d_h` hidden sequence with a per-position validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSeq {
    pub values: Mat<f32>,
    pub mask: Vec<bool>,
}

impl HiddenSeq {
    /// All positions valid.
    pub fn new(values: Mat<f32>) -> Result<Self> {
        let mask = vec![true; values.rows()];
        Self::with_mask(values, mask)
    }

    pub fn with_mask(values: Mat<f32>, mask: Vec<bool>) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Shape("hidden sequence must have at least one position".into()));
        }
        if mask.len() != values.rows() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} positions",
                mask.len(),
                values.rows()
            )));
        }
        if !values.all_finite() {
            return Err(Error::invalid("hidden sequence contains non-finite values"));
        }
        Ok(HiddenSeq { values, mask })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// How a context encoding is reduced to a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosineLossConfig {
    /// `1` pulls the pair together, `-1` pushes it apart.
    pub y: i8,
    pub margin: f64,
    pub pooling: Pooling,
}

impl Default for CosineLossConfig {
    fn default() -> Self {
        CosineLossConfig {
            y: 1,
            margin: 0.0,
            pooling: Pooling::Mean,
        }
    }
}

impl CosineLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.y != 1 && self.y != -1 {
            return Err(Error::config(format!("cosine label must be 1 or -1, got {}", self.y)));
        }
        Ok(())
    }
}
