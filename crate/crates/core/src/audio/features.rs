use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE_HZ: f32 = 50.0;
pub const DEFAULT_FEATURE_DIM: usize = 32;

const MAGIC: &[u8; 4] = b"CAF1";

/// `F x d` row-major feature matrix standing in for a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    n_frames: usize,
    dim: usize,
    pub frame_rate_hz: f32,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, dim: usize, frame_rate_hz: f32) -> Result<Self> {
        if dim == 0 || frames.is_empty() || frames.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of width {dim}",
                frames.len()
            )));
        }
        if let Some(bad) = frames.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value {bad}")));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::invalid(format!("bad frame rate {frame_rate_hz}")));
        }
        Ok(FeatureSequence {
            n_frames: frames.len() / dim,
            frames,
            dim,
            frame_rate_hz,
        })
    }

    pub fn zeros(n_frames: usize, dim: usize, frame_rate_hz: f32) -> Self {
        FeatureSequence {
            frames: vec![0.0; n_frames * dim],
            n_frames,
            dim,
            frame_rate_hz,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn duration_seconds(&self) -> f32 {
        self.n_frames as f32 / self.frame_rate_hz
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.frames[i * self.dim..(i + 1) * self.dim]
    }

    /// Little-endian: magic, `F: u32`, `d: u32`, `frame_rate_hz: f32`, data.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.frame_rate_hz.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.frames.len() * 4);
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| bad(format!("short header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let rate = f32::from_le_bytes(header[12..16].try_into().unwrap());
        let mut data = vec![0u8; n * d * 4];
        r.read_exact(&mut data)
            .map_err(|e| bad(format!("truncated data: {e}")))?;
        let frames = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureSequence::new(frames, d, rate).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}
