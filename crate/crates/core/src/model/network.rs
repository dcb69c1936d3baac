use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::{HiddenSeq, ModelConfig, CONTEXT_ENCODER, DECODER, FUSION, SPEECH_ENCODER};
use crate::audio::FeatureSequence;
use crate::corpus::{ContextWindow, SpecialToken};
use crate::seed;
use crate::tensor::{AttnPlan, Graph, Mat, ParamId, ParamStore, Real, Var};
use crate::{Error, Result};

/// Dropout state for one forward pass; `off()` for inference.
pub struct Dropout {
    p: f64,
    rng: Option<seed::Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: seed::Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    fn apply<T: Real>(&mut self, g: &mut Graph<T>, v: Var) -> Var {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => g.dropout(v, self.p, rng),
            _ => v,
        }
    }
}

/// A packed batch of variable-length sequences: one tall node whose rows are
/// the concatenated sequences.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub var: Var,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn offsets(&self) -> Vec<usize> {
        offsets(&self.lens)
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `(start, len)` for every sequence.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.offsets().into_iter().zip(self.lens.iter().copied()).collect()
    }
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    lens.iter()
        .map(|&l| {
            let o = acc;
            acc += l;
            o
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    cross_q: Linear,
    cross_kv: Linear,
    cross_proj: Linear,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    speech_in: Linear,
    speech_layers: Vec<EncoderLayer>,
    speech_ln: Norm,
    ctx_embed: ParamId,
    ctx_layers: Vec<EncoderLayer>,
    ctx_ln: Norm,
    fusion: Linear,
    dec_embed: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: Norm,
    dec_out_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

type Alloc<'a> = dyn FnMut(String, usize, usize, Init) -> Result<ParamId> + 'a;

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Normal((2.0 / (fan_in + fan_out) as f64).sqrt())
}

fn linear(alloc: &mut Alloc, name: &str, i: usize, o: usize) -> Result<Linear> {
    Ok(Linear {
        w: alloc(format!("{name}.weight"), i, o, xavier(i, o))?,
        b: alloc(format!("{name}.bias"), 1, o, Init::Zeros)?,
    })
}

fn norm(alloc: &mut Alloc, name: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        g: alloc(format!("{name}.gamma"), 1, d, Init::Ones)?,
        b: alloc(format!("{name}.beta"), 1, d, Init::Zeros)?,
    })
}

fn encoder_layers(alloc: &mut Alloc, prefix: &str, cfg: &ModelConfig) -> Result<Vec<EncoderLayer>> {
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
    (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("{prefix}layers.{l}");
            Ok(EncoderLayer {
                ln1: norm(alloc, &format!("{p}.attn_norm"), d)?,
                qkv: linear(alloc, &format!("{p}.attn.qkv"), d, 3 * d)?,
                proj: linear(alloc, &format!("{p}.attn.out"), d, d)?,
                ln2: norm(alloc, &format!("{p}.ffn_norm"), d)?,
                ff1: linear(alloc, &format!("{p}.ffn.up"), d, f)?,
                ff2: linear(alloc, &format!("{p}.ffn.down"), f, d)?,
            })
        })
        .collect()
}

fn layout(cfg: &ModelConfig, alloc: &mut Alloc) -> Result<Layout> {
    let (d, f, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
    let embed_std = Init::Normal(1.0 / (d as f64).sqrt());
    let speech_in = linear(
        alloc,
        &format!("{SPEECH_ENCODER}frontend"),
        cfg.feature_dim * cfg.frame_stride,
        d,
    )?;
    let speech_layers = encoder_layers(alloc, SPEECH_ENCODER, cfg)?;
    let speech_ln = norm(alloc, &format!("{SPEECH_ENCODER}final_norm"), d)?;
    let ctx_embed = alloc(format!("{CONTEXT_ENCODER}embed"), v, d, embed_std)?;
    let ctx_layers = encoder_layers(alloc, CONTEXT_ENCODER, cfg)?;
    let ctx_ln = norm(alloc, &format!("{CONTEXT_ENCODER}final_norm"), d)?;
    let fusion = linear(alloc, &format!("{FUSION}linear"), d, d)?;
    let dec_embed = alloc(format!("{DECODER}embed"), v, d, embed_std)?;
    let dec_layers = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("{DECODER}layers.{l}");
            Ok(DecoderLayer {
                ln1: norm(alloc, &format!("{p}.self_norm"), d)?,
                qkv: linear(alloc, &format!("{p}.self_attn.qkv"), d, 3 * d)?,
                proj: linear(alloc, &format!("{p}.self_attn.out"), d, d)?,
                ln2: norm(alloc, &format!("{p}.cross_norm"), d)?,
                cross_q: linear(alloc, &format!("{p}.cross_attn.q"), d, d)?,
                cross_kv: linear(alloc, &format!("{p}.cross_attn.kv"), d, 2 * d)?,
                cross_proj: linear(alloc, &format!("{p}.cross_attn.out"), d, d)?,
                ln3: norm(alloc, &format!("{p}.ffn_norm"), d)?,
                ff1: linear(alloc, &format!("{p}.ffn.up"), d, f)?,
                ff2: linear(alloc, &format!("{p}.ffn.down"), f, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dec_ln = norm(alloc, &format!("{DECODER}final_norm"), d)?;
    let dec_out_bias = alloc(format!("{DECODER}output_bias"), 1, v, Init::Zeros)?;
    Ok(Layout {
        speech_in,
        speech_layers,
        speech_ln,
        ctx_embed,
        ctx_layers,
        ctx_ln,
        fusion,
        dec_embed,
        dec_layers,
        dec_ln,
        dec_out_bias,
    })
}

/// Sinusoidal position table restarted at 0 for each sequence.
fn positions<T: Real>(lens: &[usize], d: usize) -> Mat<T> {
    let total = lens.iter().sum();
    let mut m = Mat::zeros(total, d);
    let mut r = 0;
    for &len in lens {
        for pos in 0..len {
            let row = m.row_mut(r);
            for i in 0..d / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                row[2 * i] = T::from_f64(angle.sin());
                row[2 * i + 1] = T::from_f64(angle.cos());
            }
            r += 1;
        }
    }
    m
}

/// The context-aware recognizer. Parameters are grouped by name prefix into
/// speech encoder, context encoder, fusion and decoder.
#[derive(Debug, Clone)]
pub struct CaAsr<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> CaAsr<T> {
    /// Fresh model; each array is initialized from its own seeded stream so
    /// the values do not depend on construction order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = layout(&config, &mut |name, rows, cols, init| {
            let data = match init {
                Init::Zeros => vec![T::zero(); rows * cols],
                Init::Ones => vec![T::one(); rows * cols],
                Init::Normal(std) => {
                    let mut rng = seed::rng(seed, "init", seed::string_id(&name));
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..rows * cols).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            Ok(params.add(name, Mat::from_vec(rows, cols, data)))
        })?;
        Ok(CaAsr {
            config,
            params,
            layout,
        })
    }

    /// Rebuild from stored arrays; every expected name must be present with
    /// the expected shape and no extra arrays are allowed.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut seen = 0;
        let layout = layout(&config, &mut |name, rows, cols, _| {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if params.get(id).shape() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {rows}x{cols}, found {:?}",
                    params.get(id).shape()
                )));
            }
            seen += 1;
            Ok(id)
        })?;
        if seen != params.len() {
            return Err(Error::invalid(format!(
                "{} unexpected parameter arrays",
                params.len() - seen
            )));
        }
        Ok(CaAsr {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> CaAsr<U> {
        CaAsr {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Parameter ids whose names start with any of `prefixes`.
    pub fn ids_with_prefixes(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| prefixes.iter().any(|p| self.params.name(id).starts_with(p)))
            .collect()
    }

    fn lin(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Var {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn ln(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Var {
        let gamma = g.param(&self.params, n.g);
        let beta = g.param(&self.params, n.b);
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, up: Linear, down: Linear) -> Var {
        let h = self.lin(g, x, up);
        let h = g.relu(h);
        self.lin(g, h, down)
    }

    fn self_attention(&self, g: &mut Graph<T>, x: Var, plan: &Arc<AttnPlan>, qkv: Linear, out: Linear) -> Var {
        let d = self.config.hidden_dim;
        let h = self.lin(g, x, qkv);
        let a = g.attention((h, 0), (h, d), (h, 2 * d), d, plan.clone());
        self.lin(g, a, out)
    }

    fn encoder_stack(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        lens: &[usize],
        layers: &[EncoderLayer],
        final_norm: Norm,
        drop: &mut Dropout,
    ) -> Var {
        let plan = Arc::new(AttnPlan::self_attention(lens, self.config.encoder_heads, false));
        for l in layers {
            let h = self.ln(g, x, l.ln1);
            let a = self.self_attention(g, h, &plan, l.qkv, l.proj);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let h = self.ln(g, x, l.ln2);
            let f = self.ffn(g, h, l.ff1, l.ff2);
            let f = drop.apply(g, f);
            x = g.add(x, f);
        }
        self.ln(g, x, final_norm)
    }

    fn embed(&self, g: &mut Graph<T>, table: ParamId, ids: &[u32], lens: &[usize]) -> Var {
        let d = self.config.hidden_dim;
        let t = g.param(&self.params, table);
        let e = g.embedding(t, ids);
        let e = g.scale(e, (d as f64).sqrt());
        let pe = g.input(positions(lens, d));
        g.add(e, pe)
    }

    /// Speech encoder over a batch of feature sequences. Every `stride`
    /// consecutive frames are stacked (zero-padded at the end) and projected
    /// to the hidden width, so `T_s = ceil(F / stride)`.
    pub fn speech_encoder(
        &self,
        g: &mut Graph<T>,
        features: &[&FeatureSequence],
        drop: &mut Dropout,
    ) -> Result<SeqBatch> {
        let (dim, stride) = (self.config.feature_dim, self.config.frame_stride);
        let mut lens = Vec::with_capacity(features.len());
        for f in features {
            if f.frame_count() == 0 {
                return Err(Error::invalid("speech features are empty"));
            }
            if f.dim() != dim {
                return Err(Error::Shape(format!(
                    "feature dim {} does not match model feature dim {dim}",
                    f.dim()
                )));
            }
            lens.push(self.config.speech_length(f.frame_count()));
        }
        if features.is_empty() {
            return Err(Error::invalid("empty speech batch"));
        }
        let mut input = Mat::zeros(lens.iter().sum(), dim * stride);
        let mut r = 0;
        for (f, &len) in features.iter().zip(&lens) {
            for t in 0..len {
                let row = input.row_mut(r);
                for s in 0..stride {
                    let frame = t * stride + s;
                    if frame < f.frame_count() {
                        for (dst, &src) in row[s * dim..(s + 1) * dim].iter_mut().zip(f.frame(frame)) {
                            *dst = T::from_f64(src as f64);
                        }
                    }
                }
                r += 1;
            }
        }
        let x = g.input(input);
        let x = self.lin(g, x, self.layout.speech_in);
        let pe = g.input(positions(&lens, self.config.hidden_dim));
        let x = g.add(x, pe);
        let var = self.encoder_stack(g, x, &lens, &self.layout.speech_layers, self.layout.speech_ln, drop);
        Ok(SeqBatch { var, lens })
    }

    /// Context encoder over token-id sequences of length `1..=max_context_tokens`.
    pub fn context_encoder(&self, g: &mut Graph<T>, contexts: &[&[u32]], drop: &mut Dropout) -> Result<SeqBatch> {
        if contexts.is_empty() {
            return Err(Error::invalid("empty context batch"));
        }
        let mut lens = Vec::with_capacity(contexts.len());
        let mut ids = Vec::new();
        for c in contexts {
            if c.is_empty() || c.len() > self.config.max_context_tokens {
                return Err(Error::invalid(format!(
                    "context length {} outside 1..={}; truncate before encoding",
                    c.len(),
                    self.config.max_context_tokens
                )));
            }
            self.check_ids(c)?;
            lens.push(c.len());
            ids.extend_from_slice(c);
        }
        let x = self.embed(g, self.layout.ctx_embed, &ids, &lens);
        let var = self.encoder_stack(g, x, &lens, &self.layout.ctx_layers, self.layout.ctx_ln, drop);
        Ok(SeqBatch { var, lens })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Per-sample sequence-axis concatenation `[speech; context]` followed by
    /// a position-wise affine map and ReLU.
    pub fn fuse(&self, g: &mut Graph<T>, speech: &SeqBatch, context: &SeqBatch) -> Result<SeqBatch> {
        if speech.lens.len() != context.lens.len() {
            return Err(Error::Shape(format!(
                "fusing {} speech sequences with {} contexts",
                speech.lens.len(),
                context.lens.len()
            )));
        }
        if g.shape(speech.var).1 != g.shape(context.var).1 {
            return Err(Error::Shape("speech and context widths differ".into()));
        }
        let (so, co) = (speech.offsets(), context.offsets());
        let mut index = Vec::with_capacity(speech.total() + context.total());
        let mut lens = Vec::with_capacity(speech.lens.len());
        for i in 0..speech.lens.len() {
            index.extend((0..speech.lens[i]).map(|j| (0u32, (so[i] + j) as u32)));
            index.extend((0..context.lens[i]).map(|j| (1u32, (co[i] + j) as u32)));
            lens.push(speech.lens[i] + context.lens[i]);
        }
        let cat = g.gather_rows(&[speech.var, context.var], &index);
        let h = self.lin(g, cat, self.layout.fusion);
        let var = g.relu(h);
        Ok(SeqBatch { var, lens })
    }

    /// Cross-attention keys and values of `memory`, one node per decoder layer.
    fn memory_kv(&self, g: &mut Graph<T>, memory: Var) -> Vec<Var> {
        self.layout
            .dec_layers
            .iter()
            .map(|l| self.lin(g, memory, l.cross_kv))
            .collect()
    }

    /// Final decoder hidden states for teacher-forced inputs.
    fn decoder_hidden(
        &self,
        g: &mut Graph<T>,
        mem_kv: &[Var],
        mem_lens: &[usize],
        inputs: &[u32],
        lens: &[usize],
        drop: &mut Dropout,
    ) -> Var {
        let (d, heads) = (self.config.hidden_dim, self.config.decoder_heads);
        let self_plan = Arc::new(AttnPlan::self_attention(lens, heads, true));
        let cross_plan = Arc::new(AttnPlan::cross_attention(lens, mem_lens, heads));
        let mut x = self.embed(g, self.layout.dec_embed, inputs, lens);
        for (l, &kv) in self.layout.dec_layers.iter().zip(mem_kv) {
            let h = self.ln(g, x, l.ln1);
            let a = self.self_attention(g, h, &self_plan, l.qkv, l.proj);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let h = self.ln(g, x, l.ln2);
            let q = self.lin(g, h, l.cross_q);
            let a = g.attention((q, 0), (kv, 0), (kv, d), d, cross_plan.clone());
            let a = self.lin(g, a, l.cross_proj);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let h = self.ln(g, x, l.ln3);
            let f = self.ffn(g, h, l.ff1, l.ff2);
            let f = drop.apply(g, f);
            x = g.add(x, f);
        }
        self.ln(g, x, self.layout.dec_ln)
    }

    /// Logits through the tied output embedding.
    fn logits(&self, g: &mut Graph<T>, h: Var) -> Var {
        let e = g.param(&self.params, self.layout.dec_embed);
        let b = g.param(&self.params, self.layout.dec_out_bias);
        let l = g.matmul_t(h, e);
        g.add_row(l, b)
    }

    /// Mean token-level cross-entropy of `targets` (EOS appended) given the
    /// memory the decoder attends to, with teacher forcing.
    pub fn decode_loss(
        &self,
        g: &mut Graph<T>,
        memory: &SeqBatch,
        targets: &[&[u32]],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if targets.len() != memory.lens.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} memories",
                targets.len(),
                memory.lens.len()
            )));
        }
        let (bos, eos) = (SpecialToken::Bos.id(), SpecialToken::Eos.id());
        let mut inputs = Vec::new();
        let mut gold = Vec::new();
        let mut lens = Vec::with_capacity(targets.len());
        for t in targets {
            if t.is_empty() {
                return Err(Error::invalid("empty decoding target"));
            }
            if t.len() + 1 > self.config.max_decode_len {
                return Err(Error::invalid(format!(
                    "target of {} tokens exceeds max_decode_len {}",
                    t.len(),
                    self.config.max_decode_len
                )));
            }
            self.check_ids(t)?;
            inputs.push(bos);
            inputs.extend_from_slice(t);
            gold.extend_from_slice(t);
            gold.push(eos);
            lens.push(t.len() + 1);
        }
        let kv = self.memory_kv(g, memory.var);
        let h = self.decoder_hidden(g, &kv, &memory.lens, &inputs, &lens, drop);
        let logits = self.logits(g, h);
        Ok(g.cross_entropy(logits, &gold))
    }

    /// Greedy decoding for every memory in the batch. Generation stops at
    /// EOS or after `max_len` tokens; EOS is not included in the output.
    pub fn generate_batch(&self, g: &mut Graph<T>, memory: &SeqBatch, max_len: usize) -> Vec<Vec<u32>> {
        let n = memory.lens.len();
        let d = self.config.hidden_dim;
        let kv_vars = self.memory_kv(g, memory.var);
        let kv: Vec<Mat<T>> = kv_vars.iter().map(|&v| g.value(v).clone()).collect();
        let mem_off = memory.offsets();
        let (bos, eos) = (SpecialToken::Bos.id(), SpecialToken::Eos.id());
        let mut prefixes: Vec<Vec<u32>> = vec![vec![bos]; n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let mut step = Graph::new(false);
            let mem_lens: Vec<usize> = active.iter().map(|&i| memory.lens[i]).collect();
            let kv_in: Vec<Var> = kv
                .iter()
                .map(|m| {
                    let mut sub = Mat::zeros(mem_lens.iter().sum(), 2 * d);
                    let mut r = 0;
                    for &i in &active {
                        for j in 0..memory.lens[i] {
                            sub.row_mut(r).copy_from_slice(m.row(mem_off[i] + j));
                            r += 1;
                        }
                    }
                    step.input(sub)
                })
                .collect();
            let lens: Vec<usize> = active.iter().map(|&i| prefixes[i].len()).collect();
            let inputs: Vec<u32> = active.iter().flat_map(|&i| prefixes[i].iter().copied()).collect();
            let h = self.decoder_hidden(&mut step, &kv_in, &mem_lens, &inputs, &lens, &mut Dropout::off());
            let last: Vec<(u32, u32)> = offsets(&lens)
                .iter()
                .zip(&lens)
                .map(|(&o, &l)| (0, (o + l - 1) as u32))
                .collect();
            let h_last = step.gather_rows(&[h], &last);
            let logits = self.logits(&mut step, h_last);
            let lm = step.value(logits);
            for (r, &i) in active.iter().enumerate() {
                let row = lm.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                let tok = best as u32;
                if tok == eos {
                    done[i] = true;
                } else {
                    prefixes[i].push(tok);
                }
            }
        }
        prefixes.into_iter().map(|mut p| p.split_off(1)).collect()
    }

    /// Full recognizer for a batch: speech, context, fusion, greedy decoding.
    pub fn transcribe_batch(&self, features: &[&FeatureSequence], contexts: &[&[u32]]) -> Result<Vec<Vec<u32>>> {
        let mut g = Graph::new(false);
        let mut drop = Dropout::off();
        let s = self.speech_encoder(&mut g, features, &mut drop)?;
        let c = self.context_encoder(&mut g, contexts, &mut drop)?;
        let fused = self.fuse(&mut g, &s, &c)?;
        Ok(self.generate_batch(&mut g, &fused, self.config.max_decode_len))
    }

    /// Teacher-forced recognition loss for a batch, returned with the graph
    /// for backpropagation.
    pub fn asr_loss(
        &self,
        g: &mut Graph<T>,
        features: &[&FeatureSequence],
        contexts: &[&[u32]],
        targets: &[&[u32]],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let s = self.speech_encoder(g, features, drop)?;
        let c = self.context_encoder(g, contexts, drop)?;
        let fused = self.fuse(g, &s, &c)?;
        self.decode_loss(g, &fused, targets, drop)
    }

    /// Next-utterance loss with the decoder reading the context encoding
    /// directly (text-only pre-training).
    pub fn pretrain_loss(
        &self,
        g: &mut Graph<T>,
        contexts: &[&[u32]],
        targets: &[&[u32]],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let c = self.context_encoder(g, contexts, drop)?;
        self.decode_loss(g, &c, targets, drop)
    }
}

impl<T: Real> CaAsr<T> {
    fn to_hidden(&self, g: &Graph<T>, batch: &SeqBatch) -> Result<HiddenSeq> {
        HiddenSeq::new(g.value(batch.var).cast())
    }

    fn hidden_input(&self, g: &mut Graph<T>, h: &HiddenSeq) -> Result<SeqBatch> {
        if h.dim() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "hidden width {} does not match model width {}",
                h.dim(),
                self.config.hidden_dim
            )));
        }
        if h.valid_len() != h.len() {
            return Err(Error::invalid("masked positions are not supported as decoder memory"));
        }
        Ok(SeqBatch {
            var: g.input(h.values.cast()),
            lens: vec![h.len()],
        })
    }

    /// Inference-mode speech encoding of one utterance.
    pub fn encode_speech(&self, features: &FeatureSequence) -> Result<HiddenSeq> {
        let mut g = Graph::new(false);
        let b = self.speech_encoder(&mut g, &[features], &mut Dropout::off())?;
        self.to_hidden(&g, &b)
    }

    /// Inference-mode encoding of an already tokenized context window.
    pub fn encode_context(&self, window: &ContextWindow) -> Result<HiddenSeq> {
        let mut g = Graph::new(false);
        let b = self.context_encoder(&mut g, &[&window.token_ids], &mut Dropout::off())?;
        self.to_hidden(&g, &b)
    }

    /// Inference-mode encodings of many token sequences.
    pub fn encode_contexts(&self, contexts: &[&[u32]]) -> Result<Vec<HiddenSeq>> {
        let mut g = Graph::new(false);
        let b = self.context_encoder(&mut g, contexts, &mut Dropout::off())?;
        let all = g.value(b.var);
        b.segments()
            .into_iter()
            .map(|(start, len)| {
                let mut m = Mat::zeros(len, all.cols());
                for r in 0..len {
                    for (dst, &src) in m.row_mut(r).iter_mut().zip(all.row(start + r)) {
                        *dst = src.as_f64() as f32;
                    }
                }
                HiddenSeq::new(m)
            })
            .collect()
    }

    pub fn fuse_hidden(&self, speech: &HiddenSeq, context: &HiddenSeq) -> Result<HiddenSeq> {
        if speech.dim() != context.dim() {
            return Err(Error::Shape(format!(
                "speech width {} differs from context width {}",
                speech.dim(),
                context.dim()
            )));
        }
        let mut g = Graph::new(false);
        let s = self.hidden_input(&mut g, speech)?;
        let c = self.hidden_input(&mut g, context)?;
        let f = self.fuse(&mut g, &s, &c)?;
        self.to_hidden(&g, &f)
    }

    /// Cross-entropy of one target given fused memory (inference mode).
    pub fn decode_loss_hidden(&self, fused: &HiddenSeq, target_ids: &[u32]) -> Result<f64> {
        let mut g = Graph::new(false);
        let m = self.hidden_input(&mut g, fused)?;
        let l = self.decode_loss(&mut g, &m, &[target_ids], &mut Dropout::off())?;
        Ok(g.scalar(l).as_f64())
    }

    /// Greedy decoding from fused memory.
    pub fn generate(&self, fused: &HiddenSeq, max_decode_len: usize) -> Result<Vec<u32>> {
        let mut g = Graph::new(false);
        let m = self.hidden_input(&mut g, fused)?;
        Ok(self.generate_batch(&mut g, &m, max_decode_len).remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Grads;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            ffn_dim: 12,
            encoder_layers: 1,
            encoder_heads: 2,
            decoder_layers: 1,
            decoder_heads: 2,
            vocab_size: vocab,
            feature_dim: 4,
            frame_stride: 2,
            max_decode_len: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn features(n: usize, dim: usize, s: u64) -> FeatureSequence {
        let mut rng = seed::rng(s, "test_features", 0);
        let dist = Normal::new(0.0, 1.0).unwrap();
        FeatureSequence::new((0..n * dim).map(|_| dist.sample(&mut rng)).collect(), dim, 50.0).unwrap()
    }

    #[test]
    fn shapes_follow_the_contract() {
        let m = CaAsr::<f32>::new(tiny(12), 1).unwrap();
        let f = features(50, 4, 1);
        assert_eq!(m.encode_speech(&f).unwrap().len(), 25);
        assert_eq!(m.encode_speech(&features(51, 4, 1)).unwrap().len(), 26);
        let bos_only = ContextWindow {
            entries: vec![],
            token_ids: vec![SpecialToken::Bos.id()],
        };
        let c = m.encode_context(&bos_only).unwrap();
        assert_eq!((c.len(), c.dim()), (1, 8));
        let s = m.encode_speech(&f).unwrap();
        let fused = m.fuse_hidden(&s, &c).unwrap();
        assert_eq!(fused.len(), 26);
        assert!(fused.values.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_input_is_finite_and_encoding_is_deterministic() {
        let m = CaAsr::<f32>::new(tiny(12), 2).unwrap();
        let z = FeatureSequence::zeros(30, 4, 50.0);
        let a = m.encode_speech(&z).unwrap();
        assert!(a.values.all_finite());
        assert_eq!(a, m.encode_speech(&z).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cfg = tiny(12);
        cfg.max_context_tokens = 5;
        let m = CaAsr::<f32>::new(cfg, 3).unwrap();
        let long = ContextWindow {
            entries: vec![],
            token_ids: vec![8; 6],
        };
        assert!(m.encode_context(&long).is_err());
        let empty = ContextWindow::default();
        assert!(m.encode_context(&empty).is_err());
        assert!(m.encode_speech(&FeatureSequence::zeros(0, 4, 50.0)).is_err());
        let s = m.encode_speech(&features(10, 4, 3)).unwrap();
        assert!(m.decode_loss_hidden(&s, &[]).is_err());
        let wide = HiddenSeq::new(Mat::zeros(2, 9)).unwrap();
        assert!(m.fuse_hidden(&s, &wide).is_err());
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let vocab = 40;
        let mut m = CaAsr::<f32>::new(tiny(vocab), 4).unwrap();
        // Zeroed output embedding and bias give exactly uniform logits.
        for id in m.ids_with_prefixes(&["decoder.embed", "decoder.output_bias"]) {
            m.params_mut().get_mut(id).as_mut_slice().fill(0.0);
        }
        let s = m.encode_speech(&features(20, 4, 4)).unwrap();
        let l = m.decode_loss_hidden(&s, &[9, 10, 11]).unwrap();
        assert!((l - (vocab as f64).ln()).abs() < 1e-5, "{l}");
    }

    #[test]
    fn batch_loss_ignores_batch_order() {
        let m = CaAsr::<f64>::new(tiny(20), 5).unwrap();
        let (f1, f2) = (features(12, 4, 1), features(7, 4, 2));
        let (c1, c2) = (vec![1u32, 4, 9, 10], vec![1u32]);
        let (t1, t2) = (vec![8u32, 9], vec![11u32, 12, 13]);
        let mut g = Graph::new(false);
        let a = m
            .asr_loss(&mut g, &[&f1, &f2], &[&c1, &c2], &[&t1, &t2], &mut Dropout::off())
            .unwrap();
        let b = m
            .asr_loss(&mut g, &[&f2, &f1], &[&c2, &c1], &[&t2, &t1], &mut Dropout::off())
            .unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-12);
    }

    #[test]
    fn batched_generation_matches_single() {
        let m = CaAsr::<f32>::new(tiny(20), 6).unwrap();
        let (f1, f2) = (features(12, 4, 1), features(7, 4, 2));
        let (c1, c2) = (vec![1u32, 4, 9, 10], vec![1u32]);
        let both = m.transcribe_batch(&[&f1, &f2], &[&c1, &c2]).unwrap();
        assert_eq!(both[0], m.transcribe_batch(&[&f1], &[&c1]).unwrap()[0]);
        assert_eq!(both[1], m.transcribe_batch(&[&f2], &[&c2]).unwrap()[0]);
        assert!(both.iter().all(|o| o.len() <= 10));
    }

    #[test]
    fn parameter_groups_are_disjoint_and_complete() {
        let m = CaAsr::<f32>::new(tiny(12), 7).unwrap();
        let groups = [SPEECH_ENCODER, CONTEXT_ENCODER, FUSION, DECODER];
        let mut total = 0;
        for g in groups {
            let ids = m.ids_with_prefixes(&[g]);
            assert!(!ids.is_empty());
            total += ids.len();
        }
        assert_eq!(total, m.params().len());
        let rebuilt = CaAsr::from_params(m.config().clone(), m.params().clone()).unwrap();
        assert_eq!(rebuilt.params().digests(), m.params().digests());
    }

    #[test]
    fn training_mode_dropout_changes_loss_deterministically() {
        let mut cfg = tiny(20);
        cfg.dropout = 0.3;
        let m = CaAsr::<f32>::new(cfg, 8).unwrap();
        let f = features(12, 4, 1);
        let c = vec![1u32, 9];
        let t = vec![8u32, 9];
        let run = |drop: &mut Dropout| {
            let mut g = Graph::new(true);
            let l = m.asr_loss(&mut g, &[&f], &[&c], &[&t], drop).unwrap();
            g.scalar(l)
        };
        let eval = run(&mut Dropout::off());
        let a = run(&mut Dropout::train(0.3, seed::rng(1, "d", 0)));
        let b = run(&mut Dropout::train(0.3, seed::rng(1, "d", 0)));
        assert_eq!(a, b);
        assert_ne!(a, eval);
        let mut g = Graph::new(true);
        let l = m.asr_loss(&mut g, &[&f], &[&c], &[&t], &mut Dropout::off()).unwrap();
        g.backward(l);
        let mut grads = Grads::new(m.params().len());
        g.collect_param_grads(&mut grads);
        assert!(m.params().ids().all(|id| grads.get(id).is_some()));
    }
}
