//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.

use std::collections::HashMap;

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block: a contiguous range of query rows attending over a
/// contiguous range of key/value rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` may only see keys `j <= i + (k_len - q_len)`.
    pub causal: bool,
}

impl AttnBlock {
    pub fn square(start: usize, len: usize, causal: bool) -> Self {
        AttnBlock {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            causal,
        }
    }
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
        probs: Vec<Matrix>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        live: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        softmax: Matrix,
        scale: f64,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp used inside every logarithm of a binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every trainable parameter touched by the forward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(p) => self.params.get(*p),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "node is not a scalar");
        m.get(0, 0)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, true)
    }

    /// Parameter reference; frozen parameters behave as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let requires = !self.params.is_frozen(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: requires,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let r = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul(a, b), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in add");
        let mut out = va.clone();
        out.add_assign(vb);
        let r = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), r)
    }

    /// `a + 1·row` where `row` is `1 x cols`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "column mismatch in add_row");
        let mut out = va.clone();
        let rv = vr.row(0).to_vec();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let req = self.requires(a) || self.requires(row);
        self.push(out, Op::AddRow(a, row), req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in mul");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        let r = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let r = self.requires(a);
        self.push(out, Op::Scale(a, s), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let r = self.requires(a);
        self.push(out, Op::Tanh(a), r)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let r = self.requires(a);
        self.push(out, Op::Gelu(a), r)
    }

    /// Row-wise layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            req,
        )
    }

    /// Selects rows of `src` (repetition allowed).
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Var {
        let vs = self.value(src);
        let cols = vs.cols();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < vs.rows(), "gather index {id} out of range {}", vs.rows());
            out.row_mut(i).copy_from_slice(vs.row(id));
        }
        let r = self.requires(src);
        self.push(
            out,
            Op::Gather {
                src,
                ids: ids.to_vec(),
            },
            r,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "column mismatch in concat_rows");
            data.extend_from_slice(m.data());
        }
        let r = parts.iter().any(|p| self.requires(*p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            r,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "row mismatch in concat_cols");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let r = parts.iter().any(|p| self.requires(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), r)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(vx.rows(), len);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let req = self.requires(x);
        self.push(out, Op::SliceCols { x, start }, req)
    }

    /// Mean of each `(start, len)` row segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut out = Matrix::zeros(segments.len(), cols);
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "segment_mean over an empty segment");
            let o = out.row_mut(s);
            for r in start..start + len {
                for (a, b) in o.iter_mut().zip(vx.row(r)) {
                    *a += b;
                }
            }
            let inv = 1.0 / len as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let req = self.requires(x);
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            req,
        )
    }

    /// Column-wise max over each `(start, len)` row group. Ties resolve to
    /// the first maximising row.
    pub fn group_max(&mut self, x: Var, groups: &[(usize, usize)]) -> Var {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut out = Matrix::zeros(groups.len(), cols);
        let mut argmax = vec![0usize; groups.len() * cols];
        for (g, &(start, len)) in groups.iter().enumerate() {
            assert!(len > 0, "group_max over an empty group");
            for c in 0..cols {
                let mut best = start;
                let mut best_v = vx.get(start, c);
                for r in start + 1..start + len {
                    let v = vx.get(r, c);
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                out.set(g, c, best_v);
                argmax[g * cols + c] = best;
            }
        }
        let req = self.requires(x);
        self.push(out, Op::GroupMax { x, argmax }, req)
    }

    /// Scaled dot-product multi-head attention over explicit blocks.
    ///
    /// `q` has one row per query; `k` and `v` share row indexing. Query rows
    /// not covered by any block produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &[AttnBlock],
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        assert_eq!(vk.cols(), d, "key width differs from query width");
        assert_eq!(vv.cols(), d, "value width differs from query width");
        assert_eq!(vk.rows(), vv.rows(), "key/value row mismatch");
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(vq.rows(), d);
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for b in blocks {
            assert!(b.q_start + b.q_len <= vq.rows() && b.k_start + b.k_len <= vk.rows());
            assert!(!b.causal || b.k_len >= b.q_len, "causal block needs k_len >= q_len");
            for h in 0..heads {
                let qh = slice_block(vq, b.q_start, b.q_len, h * dh, dh);
                let kh = slice_block(vk, b.k_start, b.k_len, h * dh, dh);
                let vh = slice_block(vv, b.k_start, b.k_len, h * dh, dh);
                let mut s = Matrix::zeros(b.q_len, b.k_len);
                gemm(&qh, false, &kh, true, &mut s, 0.0);
                let shift = b.k_len - b.q_len.min(b.k_len);
                for i in 0..b.q_len {
                    let row = s.row_mut(i);
                    let lim = if b.causal { i + shift + 1 } else { b.k_len };
                    let mut mx = f64::NEG_INFINITY;
                    for x in row[..lim].iter_mut() {
                        *x *= scale;
                        mx = mx.max(*x);
                    }
                    let mut sum = 0.0;
                    for x in row[..lim].iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in row[..lim].iter_mut() {
                        *x /= sum;
                    }
                    for x in row[lim..].iter_mut() {
                        *x = 0.0;
                    }
                }
                let mut o = Matrix::zeros(b.q_len, dh);
                gemm(&s, false, &vh, false, &mut o, 0.0);
                for i in 0..b.q_len {
                    out.row_mut(b.q_start + i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
                }
                probs.push(s);
            }
        }
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks: blocks.to_vec(),
                probs,
            },
            req,
        )
    }

    /// Weighted binary cross-entropy on sigmoid(logits), summed to a scalar.
    ///
    /// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
    /// logarithm; clamped entries contribute no gradient.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), targets.len(), "bce target length mismatch");
        assert_eq!(vl.len(), weights.len(), "bce weight length mismatch");
        let mut total = 0.0;
        let mut live = Vec::with_capacity(vl.len());
        for ((&l, &y), &w) in vl.data().iter().zip(targets).zip(weights) {
            let p = sigmoid(l);
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            live.push(p > PROB_CLAMP && p < 1.0 - PROB_CLAMP);
            if w != 0.0 {
                total -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            }
        }
        let req = self.requires(logits);
        self.push(
            Matrix::filled(1, 1, total),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                live,
            },
            req,
        )
    }

    /// `scale · Σ -log softmax(logits_i)[t_i]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "cross-entropy target length mismatch");
        let mut softmax = Matrix::zeros(vl.rows(), vl.cols());
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = vl.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[t];
            let sm = softmax.row_mut(r);
            for (s, x) in sm.iter_mut().zip(row) {
                *s = (x - lse).exp();
            }
        }
        let req = self.requires(logits);
        self.push(
            Matrix::filled(1, 1, total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
                scale,
            },
            req,
        )
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let params = self.param_nodes.iter().map(|(p, v)| (*p, *v)).collect();
        let mut params: Vec<(ParamId, Var)> = params;
        params.sort_by_key(|(p, _)| p.0);
        Grads { grads, params }
    }

    fn backprop_node(&self, idx: usize, gout: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(gout, false, vb, true, &mut ga, 0.0);
                    accumulate(grads, *a, ga);
                }
                if self.requires(*b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(va, true, gout, false, &mut gb, 0.0);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.requires(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.requires(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.requires(*row) {
                    let mut g = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (x, y) in g.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(grads, *row, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let d = gout.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Matrix::from_vec(va.rows(), va.cols(), d));
                }
                if self.requires(*b) {
                    let d = gout.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Matrix::from_vec(vb.rows(), vb.cols(), d));
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::Tanh(a) => {
                let y = self.value(Var(idx));
                let d = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                accumulate(grads, *a, Matrix::from_vec(y.rows(), y.cols(), d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = gout
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, Matrix::from_vec(x.rows(), x.cols(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let g = self.value(*gain).row(0);
                if self.requires(*gain) {
                    let mut gg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.row_mut(0)[c] += gout.get(r, c) * xhat.get(r, c);
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.requires(*bias) {
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (a, b) in gb.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if self.requires(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let xh = xhat.row(r);
                        let go = gout.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = go[c] * g[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        let o = gx.row_mut(r);
                        for c in 0..cols {
                            let d = go[c] * g[c];
                            o[c] = inv_std[r] * (d - sum_d / n - xh[c] * sum_dx / n);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gather { src, ids } => {
                let vs = self.value(*src);
                let mut gs = Matrix::zeros(vs.rows(), vs.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (a, b) in gs.row_mut(id).iter_mut().zip(gout.row(i)) {
                        *a += b;
                    }
                }
                accumulate(grads, *src, gs);
            }
            Op::ConcatRows(parts) => {
                let cols = gout.cols();
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.requires(*p) {
                        let d = gout.data()[off * cols..(off + rows) * cols].to_vec();
                        accumulate(grads, *p, Matrix::from_vec(rows, cols, d));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = gout.rows();
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.requires(*p) {
                        let mut g = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            g.row_mut(r).copy_from_slice(&gout.row(r)[off..off + cols]);
                        }
                        accumulate(grads, *p, g);
                    }
                    off += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut g = Matrix::zeros(vx.rows(), vx.cols());
                let len = gout.cols();
                for r in 0..vx.rows() {
                    g.row_mut(r)[*start..*start + len].copy_from_slice(gout.row(r));
                }
                accumulate(grads, *x, g);
            }
            Op::SegmentMean { x, segments } => {
                let vx = self.value(*x);
                let mut g = Matrix::zeros(vx.rows(), vx.cols());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for r in start..start + len {
                        for (a, b) in g.row_mut(r).iter_mut().zip(gout.row(s)) {
                            *a += b * inv;
                        }
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::GroupMax { x, argmax } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut g = Matrix::zeros(vx.rows(), cols);
                for (i, &r) in argmax.iter().enumerate() {
                    let (grp, c) = (i / cols, i % cols);
                    let cur = g.get(r, c);
                    g.set(r, c, cur + gout.get(grp, c));
                }
                accumulate(grads, *x, g);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = vq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Matrix::zeros(vq.rows(), d);
                let mut gk = Matrix::zeros(vk.rows(), d);
                let mut gv = Matrix::zeros(vv.rows(), d);
                let mut pi = 0;
                for b in blocks {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let qh = slice_block(vq, b.q_start, b.q_len, h * dh, dh);
                        let kh = slice_block(vk, b.k_start, b.k_len, h * dh, dh);
                        let vh = slice_block(vv, b.k_start, b.k_len, h * dh, dh);
                        let go = slice_block(gout, b.q_start, b.q_len, h * dh, dh);
                        // dV = P^T dO
                        let mut dv = Matrix::zeros(b.k_len, dh);
                        gemm(p, true, &go, false, &mut dv, 0.0);
                        // dP = dO V^T
                        let mut dp = Matrix::zeros(b.q_len, b.k_len);
                        gemm(&go, false, &vh, true, &mut dp, 0.0);
                        // dS = P * (dP - rowsum(dP * P)), then the 1/sqrt(dh) factor
                        for i in 0..b.q_len {
                            let pr = p.row(i);
                            let dot: f64 = pr.iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dp.row_mut(i).iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        let mut dq = Matrix::zeros(b.q_len, dh);
                        gemm(&dp, false, &kh, false, &mut dq, 0.0);
                        let mut dk = Matrix::zeros(b.k_len, dh);
                        gemm(&dp, true, &qh, false, &mut dk, 0.0);
                        add_block(&mut gq, &dq, b.q_start, h * dh);
                        add_block(&mut gk, &dk, b.k_start, h * dh);
                        add_block(&mut gv, &dv, b.k_start, h * dh);
                    }
                }
                if self.requires(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.requires(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.requires(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Bce {
                logits,
                targets,
                weights,
                live,
            } => {
                let vl = self.value(*logits);
                let s = gout.get(0, 0);
                let d = vl
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .zip(live)
                    .map(|(((&l, &y), &w), &alive)| {
                        if alive {
                            s * w * (sigmoid(l) - y)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *logits, Matrix::from_vec(vl.rows(), vl.cols(), d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
                scale,
            } => {
                let s = gout.get(0, 0) * scale;
                let mut g = Matrix::zeros(softmax.rows(), softmax.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let o = g.row_mut(r);
                    for (x, p) in o.iter_mut().zip(softmax.row(r)) {
                        *x = s * p;
                    }
                    o[t] -= s;
                }
                accumulate(grads, *logits, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn slice_block(m: &Matrix, row: usize, rows: usize, col: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(row + r)[col..col + cols]);
    }
    out
}

fn add_block(dst: &mut Matrix, src: &Matrix, row: usize, col: usize) {
    for r in 0..src.rows() {
        let d = &mut dst.row_mut(row + r)[col..col + src.cols()];
        for (a, b) in d.iter_mut().zip(src.row(r)) {
            *a += b;
        }
    }
}
