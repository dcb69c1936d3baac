use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CaAsr, ModelConfig};
use crate::corpus::Vocab;
use crate::tensor::{Mat, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CAK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Producing stage, e.g. `pretrain`, `finetune`, `cnrl`.
    pub stage: String,
    /// SHA-256 of the checkpoint this one was initialized from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub seed: u64,
    /// Epoch (1-based) whose weights were kept.
    #[serde(default)]
    pub selected_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_value: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    meta: CheckpointMeta,
    arrays: Vec<(String, usize, usize)>,
}

/// Model weights with their config, vocabulary and stage metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CaAsr<f32>,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: CaAsr<f32>, vocab: Vocab, meta: CheckpointMeta) -> Self {
        Checkpoint { model, vocab, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            arrays: params
                .ids()
                .map(|id| {
                    let (r, c) = params.get(id).shape();
                    (params.name(id).to_string(), r, c)
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + params.scalar_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in params.ids() {
            for v in params.get(id).as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        r = &r[len..];
        let mut params = ParamStore::new();
        for (name, rows, cols) in header.arrays {
            let n = rows * cols * 4;
            if r.len() < n {
                return Err(bad(&format!("truncated array {name}")));
            }
            let data = r[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[n..];
            params.add(name, Mat::from_vec(rows, cols, data));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if header.vocab.len() != header.config.vocab_size {
            return Err(bad("vocabulary size does not match the model config"));
        }
        let model = CaAsr::from_params(header.config, params)?;
        Ok(Checkpoint {
            model,
            vocab: header.vocab,
            meta: header.meta,
        })
    }

    /// Write the checkpoint and return the SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from_words(["alpha", "beta", "gamma"]);
        let cfg = ModelConfig {
            hidden_dim: 8,
            ffn_dim: 8,
            encoder_layers: 1,
            encoder_heads: 2,
            decoder_layers: 1,
            decoder_heads: 2,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        };
        let model = CaAsr::new(cfg, 9).unwrap();
        Checkpoint::new(
            model,
            vocab,
            CheckpointMeta {
                stage: "finetune".into(),
                parent: Some("abc".into()),
                seed: 9,
                selected_epoch: 2,
                selection_value: Some(0.25),
            },
        )
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        let hash = ck.save(&path).unwrap();
        assert_eq!(hash, file_digest(&path).unwrap());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.model.params().digests(), ck.model.params().digests());
        assert_eq!(back.digest().unwrap(), hash);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        assert!(Checkpoint::from_bytes(b"nope", p).is_err());
    }
}
