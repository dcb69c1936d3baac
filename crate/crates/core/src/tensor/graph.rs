use std::sync::Arc;

use rand::Rng;

use super::mat::{gemm, View, ViewMut};
use super::{Grads, Mat, ParamId, ParamStore, Real};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One attention problem inside a packed batch: queries
/// `q_start..q_start+q_len` attend to keys `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnPlan {
    pub heads: usize,
    /// Query `i` may only see keys `j <= i + (k_len - q_len)`.
    pub causal: bool,
    pub segments: Vec<AttnSegment>,
}

impl AttnPlan {
    /// Self-attention over consecutive segments of the given lengths.
    pub fn self_attention(lengths: &[usize], heads: usize, causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        AttnPlan {
            heads,
            causal,
            segments,
        }
    }

    /// Cross-attention: segment `i` of the queries sees segment `i` of the
    /// keys.
    pub fn cross_attention(q_lengths: &[usize], k_lengths: &[usize], heads: usize) -> Self {
        assert_eq!(q_lengths.len(), k_lengths.len(), "segment count mismatch");
        let (mut qs, mut ks) = (0, 0);
        let segments = q_lengths
            .iter()
            .zip(k_lengths)
            .map(|(&ql, &kl)| {
                let s = AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                };
                qs += ql;
                ks += kl;
                s
            })
            .collect();
        AttnPlan {
            heads,
            causal: false,
            segments,
        }
    }

    fn prob_len(&self) -> usize {
        self.heads
            * self
                .segments
                .iter()
                .map(|s| s.q_len * s.k_len)
                .sum::<usize>()
    }
}

/// A column block `[col, col + width)` of a node's value.
#[derive(Debug, Clone, Copy)]
struct Cols {
    var: usize,
    col: usize,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        row: usize,
    },
    Relu {
        a: usize,
    },
    Scale {
        a: usize,
        s: T,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Mat<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    GatherRows {
        sources: Vec<usize>,
        index: Vec<(u32, u32)>,
    },
    Attention {
        q: Cols,
        k: Cols,
        v: Cols,
        width: usize,
        plan: Arc<AttnPlan>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        probs: Mat<T>,
    },
    MeanPool {
        a: usize,
        segments: Vec<(usize, usize)>,
    },
    CosineEmbedding {
        x1: usize,
        x2: usize,
        y: f64,
        margin: f64,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations; values are computed eagerly as nodes are added.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_vars: Vec<Option<usize>>,
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Graph<T> {
    /// `grad_enabled = false` registers parameters as constants, so no
    /// gradients are tracked anywhere in the graph.
    pub fn new(grad_enabled: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled,
            param_vars: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar");
        m.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(i) = self.param_vars[id.0] {
            return Var(i);
        }
        let value = store.get(id).clone();
        let v = if self.grad_enabled {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Input, false)
        };
        self.param_vars[id.0] = Some(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b), false);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: false,
            },
            rg,
        )
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b), true);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: true,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add { a: a.0, b: b.0 }, rg)
    }

    /// Add a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: bias shape");
        let mut value = self.value(a).clone();
        let bias = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += *b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::AddRow { a: a.0, row: row.0 }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a.0);
        self.push(value, Op::Relu { a: a.0 }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale { a: a.0, s }, rg)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random_bool(p) { T::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let data = src
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Mat::from_vec(src.rows(), src.cols(), data);
        let rg = self.rg(a.0);
        self.push(value, Op::Dropout { a: a.0, mask }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm gamma");
        assert_eq!(self.shape(beta), (1, c), "layer_norm beta");
        let eps = T::from_f64(eps);
        let n = T::from_f64(c as f64);
        let src = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Mat::zeros(r, c);
        let mut out = Mat::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * rs;
            }
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut out = Mat::zeros(ids.len(), c);
        for (i, &id) in ids.iter().enumerate() {
            assert!((id as usize) < t.rows(), "embedding id {id} out of range");
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        let rg = self.rg(table.0);
        self.push(
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Output row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(u32, u32)]) -> Var {
        let c = self.shape(sources[0]).1;
        assert!(
            sources.iter().all(|s| self.shape(*s).1 == c),
            "gather_rows: width mismatch"
        );
        let mut out = Mat::zeros(index.len(), c);
        for (r, &(s, row)) in index.iter().enumerate() {
            out.row_mut(r)
                .copy_from_slice(self.value(sources[s as usize]).row(row as usize));
        }
        let rg = sources.iter().any(|s| self.rg(s.0));
        self.push(
            out,
            Op::GatherRows {
                sources: sources.iter().map(|v| v.0).collect(),
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over packed segments. Each of
    /// `q`, `k`, `v` is `(node, first column)`; all three are `width` wide.
    pub fn attention(
        &mut self,
        q: (Var, usize),
        k: (Var, usize),
        v: (Var, usize),
        width: usize,
        plan: Arc<AttnPlan>,
    ) -> Var {
        let heads = plan.heads;
        assert!(width % heads == 0, "width {width} not divisible by {heads} heads");
        let dh = width / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qm, km, vm) = (self.value(q.0), self.value(k.0), self.value(v.0));
        assert!(q.1 + width <= qm.cols() && k.1 + width <= km.cols() && v.1 + width <= vm.cols());
        let (qc, kc, vc) = (qm.cols(), km.cols(), vm.cols());
        let mut out = Mat::zeros(qm.rows(), width);
        let mut probs = vec![T::zero(); plan.prob_len()];
        let mut off = 0;
        for seg in &plan.segments {
            assert!(seg.q_start + seg.q_len <= qm.rows(), "attention: query rows");
            assert!(seg.k_start + seg.k_len <= km.rows(), "attention: key rows");
            let (ql, kl) = (seg.q_len, seg.k_len);
            if ql == 0 {
                continue;
            }
            assert!(kl > 0, "attention: query segment with no keys");
            for h in 0..heads {
                let p = &mut probs[off..off + ql * kl];
                let qv = View::new(qm.as_slice(), seg.q_start * qc + q.1 + h * dh, ql, dh, qc, 1);
                let kv = View::new(km.as_slice(), seg.k_start * kc + k.1 + h * dh, kl, dh, kc, 1);
                gemm(scale, qv, kv.t(), T::zero(), ViewMut::new(p, 0, ql, kl, kl, 1));
                for i in 0..ql {
                    let row = &mut p[i * kl..(i + 1) * kl];
                    let visible = if plan.causal {
                        (i + 1 + kl.saturating_sub(ql)).min(kl)
                    } else {
                        kl
                    };
                    let max = row[..visible]
                        .iter()
                        .copied()
                        .fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in &mut row[..visible] {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in &mut row[..visible] {
                        *x /= sum;
                    }
                    for x in &mut row[visible..] {
                        *x = T::zero();
                    }
                }
                let vv = View::new(vm.as_slice(), seg.k_start * vc + v.1 + h * dh, kl, dh, vc, 1);
                let pv = View::new(&probs[off..off + ql * kl], 0, ql, kl, kl, 1);
                let ow = out.cols();
                gemm(
                    T::one(),
                    pv,
                    vv,
                    T::zero(),
                    ViewMut::new(out.as_mut_slice(), seg.q_start * ow + h * dh, ql, dh, ow, 1),
                );
                off += ql * kl;
            }
        }
        let rg = self.rg(q.0 .0) || self.rg(k.0 .0) || self.rg(v.0 .0);
        self.push(
            out,
            Op::Attention {
                q: Cols { var: q.0 .0, col: q.1 },
                k: Cols { var: k.0 .0, col: k.1 },
                v: Cols { var: v.0 .0, col: v.1 },
                width,
                plan,
                probs,
            },
            rg,
        )
    }

    /// Mean token-level cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let lm = self.value(logits);
        let (r, c) = lm.shape();
        assert_eq!(r, targets.len(), "cross_entropy: one target per row");
        assert!(r > 0, "cross_entropy: empty batch");
        let mut probs = Mat::zeros(r, c);
        let mut total = 0.0f64;
        for i in 0..r {
            let row = lm.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let pr = probs.row_mut(i);
            for j in 0..c {
                pr[j] = (row[j] - max).exp();
                sum += pr[j];
            }
            for x in pr.iter_mut() {
                *x /= sum;
            }
            let t = targets[i] as usize;
            assert!(t < c, "target {t} out of range");
            total += (max + sum.ln() - row[t]).as_f64();
        }
        let value = Mat::from_vec(1, 1, vec![T::from_f64(total / r as f64)]);
        let rg = self.rg(logits.0);
        self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over each `(start, len)` row range; one output row per segment.
    pub fn mean_pool(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let am = self.value(a);
        let c = am.cols();
        let mut out = Mat::zeros(segments.len(), c);
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "mean_pool: empty segment");
            let inv = T::from_f64(1.0 / len as f64);
            let o = out.row_mut(s);
            for i in start..start + len {
                for (x, &y) in o.iter_mut().zip(am.row(i)) {
                    *x += y;
                }
            }
            for x in o.iter_mut() {
                *x *= inv;
            }
        }
        let rg = self.rg(a.0);
        self.push(
            out,
            Op::MeanPool {
                a: a.0,
                segments: segments.to_vec(),
            },
            rg,
        )
    }

    /// Batch mean of the cosine embedding loss between matching rows:
    /// `1 - cos` for `y = 1`, `max(0, cos - margin)` for `y = -1`.
    pub fn cosine_embedding_loss(&mut self, x1: Var, x2: Var, y: f64, margin: f64) -> Var {
        let (a, b) = (self.value(x1), self.value(x2));
        assert_eq!(a.shape(), b.shape(), "cosine loss: shape mismatch");
        let n = a.rows();
        assert!(n > 0, "cosine loss: empty batch");
        let mut total = 0.0;
        for i in 0..n {
            let c = row_cosine(a.row(i), b.row(i)).as_f64();
            total += if y > 0.0 {
                1.0 - c
            } else {
                (c - margin).max(0.0)
            };
        }
        let value = Mat::from_vec(1, 1, vec![T::from_f64(total / n as f64)]);
        let rg = self.rg(x1.0) || self.rg(x2.0);
        self.push(
            value,
            Op::CosineEmbedding {
                x1: x1.0,
                x2: x2.0,
                y,
                margin,
            },
            rg,
        )
    }

    fn grad_slot(&mut self, i: usize) -> &mut Mat<T> {
        let (r, c) = self.nodes[i].value.shape();
        self.grads[i].get_or_insert_with(|| Mat::zeros(r, c))
    }

    fn accumulate(&mut self, i: usize, g: &Mat<T>) {
        if self.rg(i) {
            self.grad_slot(i).add_assign(g);
        }
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss.0) {
            return;
        }
        self.grads[loss.0] = Some(Mat::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, g: &Mat<T>) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                if self.rg(a) {
                    // dA = G B^T (or G B when b was transposed)
                    let bm = &self.nodes[b].value;
                    let da = g.matmul(bm, !trans_b);
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let am = self.nodes[a].value.clone();
                    let db = if trans_b {
                        // d(B) = G^T A
                        let mut out = Mat::zeros(g.cols(), am.cols());
                        gemm(T::one(), g.view().t(), am.view(), T::zero(), out.view_mut());
                        out
                    } else {
                        let mut out = Mat::zeros(am.cols(), g.cols());
                        gemm(T::one(), am.view().t(), g.view(), T::zero(), out.view_mut());
                        out
                    };
                    self.accumulate(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow { a, row } => {
                self.accumulate(*a, g);
                if self.rg(*row) {
                    let mut db = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, &y) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    self.accumulate(*row, &db);
                }
            }
            Op::Relu { a } => {
                let out = &self.nodes[i].value;
                let data = g
                    .as_slice()
                    .iter()
                    .zip(out.as_slice())
                    .map(|(&gi, &o)| if o > T::zero() { gi } else { T::zero() })
                    .collect();
                let da = Mat::from_vec(g.rows(), g.cols(), data);
                self.accumulate(*a, &da);
            }
            Op::Scale { a, s } => {
                let mut da = g.clone();
                da.scale(*s);
                self.accumulate(*a, &da);
            }
            Op::Dropout { a, mask } => {
                let data = g.as_slice().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.accumulate(*a, &Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = g.shape();
                let gv = self.nodes[*gamma].value.as_slice().to_vec();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = Mat::zeros(1, c);
                    let mut db = Mat::zeros(1, c);
                    for row in 0..r {
                        let (gr, xr) = (g.row(row), xhat.row(row));
                        for j in 0..c {
                            dg.as_mut_slice()[j] += gr[j] * xr[j];
                            db.as_mut_slice()[j] += gr[j];
                        }
                    }
                    self.accumulate(*gamma, &dg);
                    self.accumulate(*beta, &db);
                }
                if self.rg(*x) {
                    let n = T::from_f64(c as f64);
                    let mut dx = Mat::zeros(r, c);
                    for row in 0..r {
                        let (gr, xr) = (g.row(row), xhat.row(row));
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                        let out = dx.row_mut(row);
                        for j in 0..c {
                            out[j] = rstd[row] * (gr[j] * gv[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let slot = self.grad_slot(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &y) in slot.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::GatherRows { sources, index } => {
                for (r, &(s, row)) in index.iter().enumerate() {
                    let src = sources[s as usize];
                    if self.rg(src) {
                        let slot = self.grad_slot(src);
                        for (x, &y) in slot.row_mut(row as usize).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                width,
                plan,
                probs,
            } => self.attention_backward(*q, *k, *v, *width, plan, probs, g),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let scale = g.get(0, 0) / T::from_f64(targets.len() as f64);
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = d.get(r, t as usize);
                        d.set(r, t as usize, v - T::one());
                    }
                    d.scale(scale);
                    self.accumulate(*logits, &d);
                }
            }
            Op::MeanPool { a, segments } => {
                if self.rg(*a) {
                    let slot = self.grad_slot(*a);
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = T::from_f64(1.0 / len as f64);
                        for r in start..start + len {
                            for (x, &y) in slot.row_mut(r).iter_mut().zip(g.row(s)) {
                                *x += y * inv;
                            }
                        }
                    }
                }
            }
            Op::CosineEmbedding { x1, x2, y, margin } => {
                let (x1, x2) = (*x1, *x2);
                let a = self.nodes[x1].value.clone();
                let b = self.nodes[x2].value.clone();
                let n = a.rows();
                let upstream = g.get(0, 0) / T::from_f64(n as f64);
                let mut da = Mat::zeros(a.rows(), a.cols());
                let mut db = Mat::zeros(b.rows(), b.cols());
                for r in 0..n {
                    let (ar, br) = (a.row(r), b.row(r));
                    let cos = row_cosine(ar, br);
                    // d loss / d cos
                    let dl = if *y > 0.0 {
                        -T::one()
                    } else if cos.as_f64() > *margin {
                        T::one()
                    } else {
                        T::zero()
                    };
                    if dl == T::zero() {
                        continue;
                    }
                    let na = ar.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let nb = br.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let s = upstream * dl;
                    for j in 0..ar.len() {
                        da.row_mut(r)[j] = s * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                        db.row_mut(r)[j] = s * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                    }
                }
                self.accumulate(x1, &da);
                self.accumulate(x2, &db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Cols,
        k: Cols,
        v: Cols,
        width: usize,
        plan: &AttnPlan,
        probs: &[T],
        g: &Mat<T>,
    ) {
        let heads = plan.heads;
        let dh = width / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qm = &self.nodes[q.var].value;
        let km = &self.nodes[k.var].value;
        let vm = &self.nodes[v.var].value;
        let (qc, kc, vc) = (qm.cols(), km.cols(), vm.cols());
        let mut dq = Mat::zeros(qm.rows(), width);
        let mut dk = Mat::zeros(km.rows(), width);
        let mut dv = Mat::zeros(vm.rows(), width);
        let gc = g.cols();
        let mut off = 0;
        let mut dp: Vec<T> = Vec::new();
        for seg in &plan.segments {
            let (ql, kl) = (seg.q_len, seg.k_len);
            if ql == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &probs[off..off + ql * kl];
                let pv = View::new(p, 0, ql, kl, kl, 1);
                let go = View::new(g.as_slice(), seg.q_start * gc + h * dh, ql, dh, gc, 1);
                // dV += P^T dO
                gemm(
                    T::one(),
                    pv.t(),
                    go,
                    T::one(),
                    ViewMut::new(dv.as_mut_slice(), seg.k_start * width + h * dh, kl, dh, width, 1),
                );
                // dP = dO V^T
                dp.clear();
                dp.resize(ql * kl, T::zero());
                let vv = View::new(vm.as_slice(), seg.k_start * vc + v.col + h * dh, kl, dh, vc, 1);
                gemm(T::one(), go, vv.t(), T::zero(), ViewMut::new(&mut dp, 0, ql, kl, kl, 1));
                // dS = P * (dP - rowsum(dP * P)), then the 1/sqrt(dh) scale
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut dp[i * kl..(i + 1) * kl];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                let ds = View::new(&dp, 0, ql, kl, kl, 1);
                let kv = View::new(km.as_slice(), seg.k_start * kc + k.col + h * dh, kl, dh, kc, 1);
                let qv = View::new(qm.as_slice(), seg.q_start * qc + q.col + h * dh, ql, dh, qc, 1);
                gemm(
                    T::one(),
                    ds,
                    kv,
                    T::one(),
                    ViewMut::new(dq.as_mut_slice(), seg.q_start * width + h * dh, ql, dh, width, 1),
                );
                gemm(
                    T::one(),
                    ds.t(),
                    qv,
                    T::one(),
                    ViewMut::new(dk.as_mut_slice(), seg.k_start * width + h * dh, kl, dh, width, 1),
                );
                off += ql * kl;
            }
        }
        for (cols, d) in [(q, dq), (k, dk), (v, dv)] {
            if !self.rg(cols.var) {
                continue;
            }
            let slot = self.grad_slot(cols.var);
            let sc = slot.cols();
            for r in 0..d.rows() {
                let dst = &mut slot.as_mut_slice()[r * sc + cols.col..r * sc + cols.col + width];
                for (x, &y) in dst.iter_mut().zip(d.row(r)) {
                    *x += y;
                }
            }
        }
    }

    /// Gradient of the last [`backward`](Self::backward) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add this graph's parameter gradients into `grads`.
    pub fn collect_param_grads(&self, grads: &mut Grads<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(i).and_then(Option::as_ref) {
                    grads.accumulate(id, g);
                }
            }
        }
    }
}

fn row_cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, s: u64) -> Mat<f64> {
        let mut rng = seed::rng(s, "graph_test", 0);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    }

    /// Central-difference check of d(loss)/d(params) for a closure that
    /// builds a scalar from parameter leaves.
    fn check<F>(store: &ParamStore<f64>, build: F)
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new(true);
        let loss = build(&mut g, store);
        g.backward(loss);
        let mut grads = Grads::new(store.len());
        g.collect_param_grads(&mut grads);
        let eps = 1e-6;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.get(id).shape();
                Mat::zeros(r, c)
            });
            for e in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).as_mut_slice()[e] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).as_mut_slice()[e] -= eps;
                let f = |s: &ParamStore<f64>| {
                    let mut g = Graph::new(false);
                    let l = build(&mut g, s);
                    g.scalar(l)
                };
                let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
                let a = analytic.as_slice()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-8,
                    "{} [{e}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn linear_relu_layernorm_ce() {
        let mut s = ParamStore::new();
        let x = s.add("x", randn(5, 4, 1));
        let w = s.add("w", randn(4, 6, 2));
        let b = s.add("b", randn(1, 6, 3));
        let gm = s.add("g", randn(1, 6, 4));
        let bt = s.add("beta", randn(1, 6, 5));
        let e = s.add("e", randn(7, 6, 6));
        check(&s, |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.relu(h);
            let (gm, bt) = (g.param(s, gm), g.param(s, bt));
            let h = g.layer_norm(h, gm, bt, 1e-5);
            let e = g.param(s, e);
            let logits = g.matmul_t(h, e);
            g.cross_entropy(logits, &[0, 3, 6, 2, 2])
        });
    }

    #[test]
    fn attention_self_causal_and_cross() {
        let mut s = ParamStore::new();
        let qkv = s.add("qkv", randn(7, 12, 7));
        let mem = s.add("mem", randn(6, 8, 8));
        let e = s.add("e", randn(5, 4, 9));
        check(&s, |g, s| {
            let qkv = g.param(s, qkv);
            let plan = Arc::new(AttnPlan::self_attention(&[3, 4], 2, true));
            let h = g.attention((qkv, 0), (qkv, 4), (qkv, 8), 4, plan);
            let mem = g.param(s, mem);
            let cross = Arc::new(AttnPlan::cross_attention(&[3, 4], &[2, 4], 2));
            let h2 = g.attention((h, 0), (mem, 0), (mem, 4), 4, cross);
            let h3 = g.add(h, h2);
            let e = g.param(s, e);
            let logits = g.matmul_t(h3, e);
            g.cross_entropy(logits, &[1, 2, 3, 4, 0, 1, 2])
        });
    }

    #[test]
    fn embedding_gather_pool_cosine() {
        let mut s = ParamStore::new();
        let t = s.add("table", randn(6, 3, 10));
        let a = s.add("a", randn(2, 3, 11));
        check(&s, |g, s| {
            let t = g.param(s, t);
            let emb = g.embedding(t, &[1, 4, 4, 0, 5]);
            let emb = g.scale(emb, 1.7);
            let a = g.param(s, a);
            let cat = g.gather_rows(&[emb, a], &[(0, 0), (1, 1), (0, 2), (0, 3), (1, 0), (0, 4)]);
            let pooled = g.mean_pool(cat, &[(0, 2), (2, 4)]);
            let other = g.mean_pool(emb, &[(0, 3), (3, 2)]);
            g.cosine_embedding_loss(pooled, other, 1.0, 0.0)
        });
    }

    #[test]
    fn cosine_negative_label_and_dropout() {
        let mut s = ParamStore::new();
        let a = s.add("a", randn(4, 5, 12));
        let b = s.add("b", randn(4, 5, 13));
        check(&s, |g, s| {
            let (a, b) = (g.param(s, a), g.param(s, b));
            let mut rng = seed::rng(0, "drop", 0);
            let a = g.dropout(a, 0.3, &mut rng);
            g.cosine_embedding_loss(a, b, -1.0, -0.2)
        });
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let mut g = Graph::<f64>::new(false);
        let x = g.input(randn(4, 4, 20));
        let plan = Arc::new(AttnPlan::self_attention(&[4], 1, true));
        let out = g.attention((x, 0), (x, 0), (x, 0), 4, plan.clone());
        let mut x2 = g.value(x).clone();
        x2.row_mut(3).iter_mut().for_each(|v| *v += 10.0);
        let y = g.input(x2);
        let out2 = g.attention((y, 0), (y, 0), (y, 0), 4, plan);
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), g.value(out2).row(r));
        }
        assert_ne!(g.value(out).row(3), g.value(out2).row(3));
    }

    #[test]
    fn cosine_loss_values() {
        let mut g = Graph::<f64>::new(false);
        let a = g.input(Mat::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
        let b = g.input(Mat::from_vec(3, 2, vec![2.0, 0.0, 0.0, 3.0, -1.0, 0.0]));
        let l = g.cosine_embedding_loss(a, b, 1.0, 0.0);
        // (0 + 1 + 2) / 3
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    }
}
