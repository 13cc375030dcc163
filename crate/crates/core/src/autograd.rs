//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Rows are the batch
//! axis throughout; sequence-aware ops take a period `T` and treat rows
//! `b*T .. (b+1)*T` as the `T` steps of window `b`.

use crate::tensor::{gemm, gemm_slices, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    RepeatEach(Var, usize),
    Tile(Var, usize),
    ColScale(Var, Var, usize),
    BlockScores(Var, Var, usize, f64),
    CausalSoftmax(Var, usize),
    BlockApply(Var, Var, usize),
    GatherRows(Var, usize, usize),
    Interleave(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients with respect to parameters, keyed by parameter index.
#[derive(Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<(usize, Mat)>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers parameter `index` with the given value; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Mat) -> Var {
        if self.param_vars.len() <= index {
            self.param_vars.resize(index + 1, None);
        }
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(index), true);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let mut out = Mat::zeros(self.value(a).rows, self.value(b).cols);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.rows, 1, "add_bias: bias must be a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, bv.cols, "add_bias: width mismatch");
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let ng = self.ng(a);
        self.push(out, Op::Elu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols: out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row-wise layer normalization with learned gain and bias (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
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
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            softmax_into(av.row(r), out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// `B x d` -> `B*period x d`; row `b*period + t` is row `b` of the input.
    pub fn repeat_each(&mut self, a: Var, period: usize) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows * period, av.cols);
        for b in 0..av.rows {
            for t in 0..period {
                out.row_mut(b * period + t).copy_from_slice(av.row(b));
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatEach(a, period), ng)
    }

    /// `T x d` -> `copies*T x d`; row `b*T + t` is row `t` of the input.
    pub fn tile(&mut self, a: Var, copies: usize) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows * copies, av.cols);
        for b in 0..copies {
            out.data[b * av.len()..(b + 1) * av.len()].copy_from_slice(&av.data);
        }
        let ng = self.ng(a);
        self.push(out, Op::Tile(a, copies), ng)
    }

    /// Scales each row `r` of `a` by `w[r, col]`.
    pub fn col_scale(&mut self, a: Var, w: Var, col: usize) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(av.rows, wv.rows, "col_scale: row mismatch");
        let mut out = av.clone();
        for r in 0..av.rows {
            let s = wv.get(r, col);
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(w);
        self.push(out, Op::ColScale(a, w, col), ng)
    }

    /// Per-window `scale * Q_b K_b^T`, giving a `B*T x T` matrix of attention logits.
    pub fn block_scores(&mut self, q: Var, k: Var, period: usize, scale: f64) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.shape(), kv.shape(), "block_scores: q/k shape mismatch");
        assert_eq!(qv.rows % period, 0, "block_scores: rows not a multiple of period");
        let dk = qv.cols;
        let blocks = qv.rows / period;
        let mut out = Mat::zeros(qv.rows, period);
        for b in 0..blocks {
            let qo = b * period * dk;
            let oo = b * period * period;
            gemm_slices(
                period,
                dk,
                period,
                &qv.data[qo..],
                dk,
                false,
                &kv.data[qo..],
                dk,
                true,
                &mut out.data[oo..],
                period,
                0.0,
            );
        }
        out.scale_assign(scale);
        let ng = self.ng(q) || self.ng(k);
        self.push(out, Op::BlockScores(q, k, period, scale), ng)
    }

    /// Row-wise softmax where row `b*T + t` may only place weight on columns `0..=t`.
    pub fn causal_softmax(&mut self, scores: Var, period: usize) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.cols, period, "causal_softmax: width must equal period");
        let mut out = Mat::zeros(sv.rows, sv.cols);
        for r in 0..sv.rows {
            let t = r % period;
            softmax_into(&sv.row(r)[..=t], &mut out.row_mut(r)[..=t]);
        }
        let ng = self.ng(scores);
        self.push(out, Op::CausalSoftmax(scores, period), ng)
    }

    /// Per-window `A_b V_b` for attention weights `A` (`B*T x T`) and values `V` (`B*T x dv`).
    pub fn block_apply(&mut self, attn: Var, v: Var, period: usize) -> Var {
        let (av, vv) = (self.value(attn), self.value(v));
        assert_eq!(av.cols, period, "block_apply: width must equal period");
        assert_eq!(av.rows, vv.rows, "block_apply: row mismatch");
        let dv = vv.cols;
        let blocks = av.rows / period;
        let mut out = Mat::zeros(vv.rows, dv);
        for b in 0..blocks {
            gemm_slices(
                period,
                period,
                dv,
                &av.data[b * period * period..],
                period,
                false,
                &vv.data[b * period * dv..],
                dv,
                false,
                &mut out.data[b * period * dv..],
                dv,
                0.0,
            );
        }
        let ng = self.ng(attn) || self.ng(v);
        self.push(out, Op::BlockApply(attn, v, period), ng)
    }

    /// Selects rows `b*period + offset` for every window `b`.
    pub fn gather_rows(&mut self, a: Var, period: usize, offset: usize) -> Var {
        let av = self.value(a);
        let blocks = av.rows / period;
        let mut out = Mat::zeros(blocks, av.cols);
        for b in 0..blocks {
            out.row_mut(b).copy_from_slice(av.row(b * period + offset));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, period, offset), ng)
    }

    /// Inverse of [`Graph::gather_rows`] over all offsets: `parts[t]` row `b` lands at row `b*T + t`.
    pub fn interleave(&mut self, parts: &[Var]) -> Var {
        let period = parts.len();
        let (blocks, cols) = self.value(parts[0]).shape();
        let mut out = Mat::zeros(blocks * period, cols);
        for (t, p) in parts.iter().enumerate() {
            let pv = self.value(*p);
            assert_eq!(pv.shape(), (blocks, cols), "interleave: part shape mismatch");
            for b in 0..blocks {
                out.row_mut(b * period + t).copy_from_slice(pv.row(b));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::Interleave(parts.to_vec()), ng)
    }

    /// Propagates `seeds` (output gradients) back through the tape and returns
    /// the gradient of every parameter node that received one.
    pub fn backward(&self, seeds: &[(Var, &Mat)]) -> ParamGrads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "backward: seed shape mismatch");
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some((*g).clone()),
            }
        }
        let mut out = ParamGrads::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out.grads.sort_by_key(|(i, _)| *i);
        out
    }

    fn backprop_node(&self, node: &Node, g: Mat, grads: &mut [Option<Mat>], out: &mut ParamGrads) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant => {}
            Op::Param(i) => out.grads.push((*i, g)),
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let slot = slot(grads, *a, val(*a));
                    gemm(&g, false, val(*b), true, slot, 1.0);
                }
                if wants(*b) {
                    let slot = slot(grads, *b, val(*b));
                    gemm(val(*a), true, &g, false, slot, 1.0);
                }
            }
            Op::AddBias(a, bias) => {
                if wants(*bias) {
                    let s = slot(grads, *bias, val(*bias));
                    for r in 0..g.rows {
                        for (x, y) in s.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) && wants(*b) {
                    accumulate(grads, *b, g.clone());
                    accumulate(grads, *a, g);
                } else if wants(*a) {
                    accumulate(grads, *a, g);
                } else if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let s = slot(grads, *a, val(*a));
                    for ((x, gy), bv) in s.data.iter_mut().zip(&g.data).zip(&val(*b).data) {
                        *x += gy * bv;
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, val(*b));
                    for ((x, gy), av) in s.data.iter_mut().zip(&g.data).zip(&val(*a).data) {
                        *x += gy * av;
                    }
                }
            }
            Op::Affine(a, scale) => {
                let mut g = g;
                g.scale_assign(*scale);
                accumulate(grads, *a, g);
            }
            Op::Elu(a) => {
                let mut g = g;
                for ((gx, xv), yv) in g.data.iter_mut().zip(&val(*a).data).zip(&node.value.data) {
                    if *xv <= 0.0 {
                        *gx *= yv + 1.0;
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = g;
                for (gx, y) in g.data.iter_mut().zip(&node.value.data) {
                    *gx *= y * (1.0 - y);
                }
                accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let mut g = g;
                for (gx, y) in g.data.iter_mut().zip(&node.value.data) {
                    *gx *= 1.0 - y * y;
                }
                accumulate(grads, *a, g);
            }
            Op::Relu(a) => {
                let mut g = g;
                for (gx, x) in g.data.iter_mut().zip(&val(*a).data) {
                    if *x <= 0.0 {
                        *gx = 0.0;
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let s = slot(grads, *a, val(*a));
                let len = g.cols;
                for r in 0..g.rows {
                    for (x, y) in s.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols;
                    if wants(*p) {
                        let s = slot(grads, *p, val(*p));
                        for r in 0..g.rows {
                            for (x, y) in s.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *x += y;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                if wants(*gain) {
                    let s = slot(grads, *gain, val(*gain));
                    for r in 0..rows {
                        for ((acc, gy), xh) in s.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *acc += gy * xh;
                        }
                    }
                }
                if wants(*bias) {
                    let s = slot(grads, *bias, val(*bias));
                    for r in 0..rows {
                        for (acc, gy) in s.data.iter_mut().zip(g.row(r)) {
                            *acc += gy;
                        }
                    }
                }
                if wants(*x) {
                    let gv = &val(*gain).data;
                    let s = slot(grads, *x, val(*x));
                    let n = cols as f64;
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            dxh[c] = gr[c] * gv[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xh[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        let sr = s.row_mut(r);
                        for c in 0..cols {
                            sr[c] += inv_std[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let mut g = g;
                for r in 0..g.rows {
                    softmax_backward_row(node.value.row(r), g.row_mut(r));
                }
                accumulate(grads, *a, g);
            }
            Op::CausalSoftmax(a, period) => {
                let mut g = g;
                for r in 0..g.rows {
                    let t = r % period;
                    let gr = g.row_mut(r);
                    softmax_backward_row(&node.value.row(r)[..=t], &mut gr[..=t]);
                    gr[t + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                accumulate(grads, *a, g);
            }
            Op::RepeatEach(a, period) => {
                let s = slot(grads, *a, val(*a));
                for b in 0..s.rows {
                    for t in 0..*period {
                        for (x, y) in s.row_mut(b).iter_mut().zip(g.row(b * period + t)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Tile(a, copies) => {
                let s = slot(grads, *a, val(*a));
                let n = s.len();
                for b in 0..*copies {
                    for (x, y) in s.data.iter_mut().zip(&g.data[b * n..(b + 1) * n]) {
                        *x += y;
                    }
                }
            }
            Op::ColScale(a, w, col) => {
                let (av, wv) = (val(*a), val(*w));
                if wants(*w) {
                    let s = slot(grads, *w, wv);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        s.data[r * s.cols + col] += dot;
                    }
                }
                if wants(*a) {
                    let s = slot(grads, *a, av);
                    for r in 0..g.rows {
                        let f = wv.get(r, *col);
                        for (x, y) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += f * y;
                        }
                    }
                }
            }
            Op::BlockScores(q, k, period, scale) => {
                let mut g = g;
                g.scale_assign(*scale);
                let (qv, kv) = (val(*q), val(*k));
                let dk = qv.cols;
                let blocks = qv.rows / period;
                let p = *period;
                if wants(*q) {
                    let s = slot(grads, *q, qv);
                    for b in 0..blocks {
                        gemm_slices(
                            p,
                            p,
                            dk,
                            &g.data[b * p * p..],
                            p,
                            false,
                            &kv.data[b * p * dk..],
                            dk,
                            false,
                            &mut s.data[b * p * dk..],
                            dk,
                            1.0,
                        );
                    }
                }
                if wants(*k) {
                    let s = slot(grads, *k, kv);
                    for b in 0..blocks {
                        gemm_slices(
                            p,
                            p,
                            dk,
                            &g.data[b * p * p..],
                            p,
                            true,
                            &qv.data[b * p * dk..],
                            dk,
                            false,
                            &mut s.data[b * p * dk..],
                            dk,
                            1.0,
                        );
                    }
                }
            }
            Op::BlockApply(attn, v, period) => {
                let (av, vv) = (val(*attn), val(*v));
                let dv = vv.cols;
                let p = *period;
                let blocks = av.rows / p;
                if wants(*attn) {
                    let s = slot(grads, *attn, av);
                    for b in 0..blocks {
                        gemm_slices(
                            p,
                            dv,
                            p,
                            &g.data[b * p * dv..],
                            dv,
                            false,
                            &vv.data[b * p * dv..],
                            dv,
                            true,
                            &mut s.data[b * p * p..],
                            p,
                            1.0,
                        );
                    }
                }
                if wants(*v) {
                    let s = slot(grads, *v, vv);
                    for b in 0..blocks {
                        gemm_slices(
                            p,
                            p,
                            dv,
                            &av.data[b * p * p..],
                            p,
                            true,
                            &g.data[b * p * dv..],
                            dv,
                            false,
                            &mut s.data[b * p * dv..],
                            dv,
                            1.0,
                        );
                    }
                }
            }
            Op::GatherRows(a, period, offset) => {
                let s = slot(grads, *a, val(*a));
                for b in 0..g.rows {
                    for (x, y) in s.row_mut(b * period + offset).iter_mut().zip(g.row(b)) {
                        *x += y;
                    }
                }
            }
            Op::Interleave(parts) => {
                let period = parts.len();
                for (t, p) in parts.iter().enumerate() {
                    if !wants(*p) {
                        continue;
                    }
                    let s = slot(grads, *p, val(*p));
                    for b in 0..s.rows {
                        for (x, y) in s.row_mut(b).iter_mut().zip(g.row(b * period + t)) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn softmax_backward_row(y: &[f64], g: &mut [f64]) {
    let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    for (gx, yv) in g.iter_mut().zip(y) {
        *gx = yv * (*gx - dot);
    }
}

fn slot<'a>(grads: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(like.rows, like.cols))
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Builds a graph exercising every op and returns `sum(out * weights)`.
    fn scalar_objective(params: &[Mat], probe: &Mat, keep: bool) -> (f64, Option<ParamGrads>) {
        let period = 3;
        let mut g = Graph::new();
        let x = g.param(0, &params[0]); // 6 x 4
        let w = g.param(1, &params[1]); // 4 x 4
        let b = g.param(2, &params[2]); // 1 x 4
        let gain = g.param(3, &params[3]); // 1 x 4
        let ctx = g.param(4, &params[4]); // 2 x 4
        let pos = g.param(5, &params[5]); // 3 x 4
        let h = g.linear(x, w, Some(b));
        let h = g.elu(h);
        let c = g.repeat_each(ctx, period);
        let p = g.tile(pos, 2);
        let h = g.add(h, c);
        let h = g.add(h, p);
        let h = g.layer_norm(h, gain, b);
        let s = g.block_scores(h, x, period, 0.7);
        let a = g.causal_softmax(s, period);
        let v = g.tanh(h);
        let o = g.block_apply(a, v, period);
        let sel = g.slice_cols(o, 1, 2);
        let wts = g.softmax_rows(sel);
        let sc = g.col_scale(o, wts, 1);
        let sg = g.sigmoid(sc);
        let m = g.mul(sg, o);
        let rl = g.relu(m);
        let cat = g.concat_cols(&[rl, m]);
        let parts: Vec<Var> = (0..period).map(|t| g.gather_rows(cat, period, t)).collect();
        let back = g.interleave(&parts);
        let out = g.affine(back, 1.3, 0.2);
        let val = g
            .value(out)
            .data
            .iter()
            .zip(&probe.data)
            .map(|(a, b)| a * b)
            .sum();
        let grads = keep.then(|| g.backward(&[(out, probe)]));
        (val, grads)
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes = [(6, 4), (4, 4), (1, 4), (1, 4), (2, 4), (3, 4)];
        let mut params: Vec<Mat> = shapes.iter().map(|&(r, c)| rand_mat(&mut rng, r, c)).collect();
        params[3].data.iter_mut().for_each(|x| *x += 1.5);
        let probe = rand_mat(&mut rng, 6, 8);
        let (_, grads) = scalar_objective(&params, &probe, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for (pi, analytic) in &grads.grads {
            for k in 0..params[*pi].len() {
                let orig = params[*pi].data[k];
                params[*pi].data[k] = orig + h;
                let (fp, _) = scalar_objective(&params, &probe, false);
                params[*pi].data[k] = orig - h;
                let (fm, _) = scalar_objective(&params, &probe, false);
                params[*pi].data[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pi}[{k}]: analytic {a} vs numeric {numeric}");
            }
        }
        assert_eq!(grads.grads.len(), 6);
    }

    #[test]
    fn causal_softmax_first_row_is_point_mass() {
        let mut g = Graph::new();
        let s = g.constant(Mat::from_vec(2, 2, vec![5.0, -3.0, 0.1, 0.2]));
        let a = g.causal_softmax(s, 2);
        assert_eq!(g.value(a).row(0), &[1.0, 0.0]);
        let row1: f64 = g.value(a).row(1).iter().sum();
        assert!((row1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Mat::filled(2, 2, 1.0));
        let w = g.param(0, &Mat::filled(2, 2, 0.5));
        let y = g.matmul(x, w);
        let grads = g.backward(&[(y, &Mat::filled(2, 2, 1.0))]);
        assert_eq!(grads.grads.len(), 1);
        assert_eq!(grads.grads[0].1.data, vec![2.0; 4]);
    }
}
