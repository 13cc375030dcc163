//! Building blocks shared by the networks: linear maps, gated residual
//! networks, variable selection and causal attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParameterStore};
use crate::autograd::{Graph, Var};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Forward-pass context: the tape being recorded plus everything needed to
/// materialize parameters and dropout masks.
pub struct Fwd<'a> {
    pub g: Graph,
    pub params: &'a ParameterStore,
    /// `Some` only in training mode with a positive dropout rate.
    pub dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Fwd<'a> {
    pub fn new(params: &'a ParameterStore, dropout: Option<(f64, ChaCha8Rng)>) -> Self {
        Fwd {
            g: Graph::new(),
            params,
            dropout: dropout.filter(|(p, _)| *p > 0.0),
        }
    }

    /// Fails with the layer name if `v` holds a non-finite value.
    pub fn check(&self, v: Var, layer: &str) -> Result<()> {
        if self.g.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("activations of `{layer}`")))
        }
    }

    pub fn p(&mut self, idx: usize) -> Var {
        self.g.param(idx, &self.params.tensors[idx])
    }

    pub fn linear(&mut self, x: Var, l: &Linear) -> Var {
        let w = self.p(l.w);
        let b = l.b.map(|b| self.p(b));
        self.g.linear(x, w, b)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - *rate;
        let (r, c) = self.g.value(x).shape();
        let mask = Mat::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }

    /// `x * w1 .. split .. first_half * sigmoid(second_half)`.
    pub fn glu(&mut self, x: Var, l: &Linear) -> Var {
        let h = self.linear(x, l);
        let out = self.g.value(h).cols / 2;
        let val = self.g.slice_cols(h, 0, out);
        let gate = self.g.slice_cols(h, out, out);
        let gate = self.g.sigmoid(gate);
        self.g.mul(val, gate)
    }

    pub fn layer_norm(&mut self, x: Var, ln: &LayerNormParams) -> Var {
        let gain = self.p(ln.gain);
        let bias = self.p(ln.bias);
        self.g.layer_norm(x, gain, bias)
    }

    /// `LayerNorm(residual + GLU(x))`.
    pub fn gated_add_norm(&mut self, x: Var, residual: Var, p: &GateAddNorm) -> Var {
        let gl = self.glu(x, &p.glu);
        let s = self.g.add(residual, gl);
        self.layer_norm(s, &p.ln)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), d_in, d_out, Init::FanIn, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), 1, d_out, Init::Zeros, rng));
        Linear { w, b, d_in, d_out }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNormParams {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), 1, d, Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), 1, d, Init::Zeros, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GateAddNorm {
    pub glu: Linear,
    pub ln: LayerNormParams,
}

impl GateAddNorm {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        GateAddNorm {
            glu: Linear::new(store, rng, &format!("{name}.glu"), d, 2 * d, true),
            ln: LayerNormParams::new(store, rng, &format!("{name}.ln"), d),
        }
    }
}

/// Context fed into a GRN: a per-row matrix, or one row per window repeated over `period` steps.
#[derive(Debug, Clone, Copy)]
pub enum Context {
    Rows(Var),
    PerWindow(Var, usize),
}

/// Gated residual network:
/// `LayerNorm(skip(a) + GLU(W2 * ELU(W1 a + b1 + Wc c) + b2))`
/// where `skip` is the identity when input and output widths agree.
#[derive(Debug, Clone)]
pub struct Grn {
    pub fc_in: Linear,
    pub fc_ctx: Option<Linear>,
    pub fc_hidden: Linear,
    pub glu: Linear,
    pub skip: Option<Linear>,
    pub ln: LayerNormParams,
    pub d_out: usize,
}

impl Grn {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        d_ctx: Option<usize>,
    ) -> Self {
        Grn {
            fc_in: Linear::new(store, rng, &format!("{name}.fc_in"), d_in, d_hidden, true),
            fc_ctx: d_ctx.map(|dc| Linear::new(store, rng, &format!("{name}.fc_ctx"), dc, d_hidden, false)),
            fc_hidden: Linear::new(store, rng, &format!("{name}.fc_hidden"), d_hidden, d_hidden, true),
            glu: Linear::new(store, rng, &format!("{name}.glu"), d_hidden, 2 * d_out, true),
            skip: (d_in != d_out).then(|| Linear::new(store, rng, &format!("{name}.skip"), d_in, d_out, true)),
            ln: LayerNormParams::new(store, rng, &format!("{name}.ln"), d_out),
            d_out,
        }
    }

    pub fn apply(&self, f: &mut Fwd, a: Var, ctx: Option<Context>) -> Var {
        let skip = match &self.skip {
            Some(l) => f.linear(a, l),
            None => a,
        };
        let mut h = f.linear(a, &self.fc_in);
        if let (Some(c), Some(l)) = (ctx, &self.fc_ctx) {
            let hc = match c {
                Context::Rows(c) => f.linear(c, l),
                Context::PerWindow(c, period) => {
                    let hc = f.linear(c, l);
                    f.g.repeat_each(hc, period)
                }
            };
            h = f.g.add(h, hc);
        }
        let h = f.g.elu(h);
        let h = f.linear(h, &self.fc_hidden);
        let h = f.dropout(h);
        let gl = f.glu(h, &self.glu);
        let s = f.g.add(skip, gl);
        f.layer_norm(s, &self.ln)
    }
}

/// Instance-wise softmax weighting over per-variable embeddings.
#[derive(Debug, Clone)]
pub struct VariableSelection {
    pub flat: Grn,
    pub per_var: Vec<Grn>,
}

impl VariableSelection {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, n_vars: usize, d: usize, d_ctx: Option<usize>) -> Self {
        VariableSelection {
            flat: Grn::new(store, rng, &format!("{name}.flat"), n_vars * d, d, n_vars, d_ctx),
            per_var: (0..n_vars)
                .map(|i| Grn::new(store, rng, &format!("{name}.var{i:02}"), d, d, d, None))
                .collect(),
        }
    }

    /// Returns `(combined, weights)`: `sum_i weights[:, i] * GRN_i(embedded_i)` and the softmax weights.
    pub fn apply(&self, f: &mut Fwd, embedded: &[Var], ctx: Option<Context>) -> (Var, Var) {
        assert_eq!(embedded.len(), self.per_var.len(), "variable count mismatch");
        let flat = f.g.concat_cols(embedded);
        let logits = self.flat.apply(f, flat, ctx);
        let weights = f.g.softmax_rows(logits);
        let mut combined: Option<Var> = None;
        for (i, (e, grn)) in embedded.iter().zip(&self.per_var).enumerate() {
            let p = grn.apply(f, *e, None);
            let w = f.g.col_scale(p, weights, i);
            combined = Some(match combined {
                Some(c) => f.g.add(c, w),
                None => w,
            });
        }
        (combined.expect("at least one variable"), weights)
    }
}

/// Per-variable scalar-to-vector embeddings `x_i * w_i + b_i`.
#[derive(Debug, Clone)]
pub struct ScalarEmbeddings {
    pub per_var: Vec<Linear>,
}

impl ScalarEmbeddings {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, n_vars: usize, d: usize) -> Self {
        ScalarEmbeddings {
            per_var: (0..n_vars)
                .map(|i| Linear::new(store, rng, &format!("{name}.var{i:02}"), 1, d, true))
                .collect(),
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var) -> Vec<Var> {
        self.per_var
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let col = f.g.slice_cols(x, i, 1);
                f.linear(col, l)
            })
            .collect()
    }
}

/// Multi-head attention where heads share one value projection and their
/// outputs are averaged before the output projection.
#[derive(Debug, Clone)]
pub struct InterpretableAttention {
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Linear,
    pub out: Linear,
    pub d_head: usize,
}

impl InterpretableAttention {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, d: usize, n_heads: usize) -> Self {
        let d_head = d / n_heads;
        InterpretableAttention {
            q: (0..n_heads)
                .map(|h| Linear::new(store, rng, &format!("{name}.q{h}"), d, d_head, false))
                .collect(),
            k: (0..n_heads)
                .map(|h| Linear::new(store, rng, &format!("{name}.k{h}"), d, d_head, false))
                .collect(),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d_head, false),
            out: Linear::new(store, rng, &format!("{name}.out"), d_head, d, true),
            d_head,
        }
    }

    /// Returns the attended output and the head-averaged attention weights (`B*T x T`).
    pub fn apply(&self, f: &mut Fwd, x: Var, period: usize) -> (Var, Mat) {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let v = f.linear(x, &self.v);
        let mut acc: Option<Var> = None;
        let mut avg_attn: Option<Mat> = None;
        for (lq, lk) in self.q.iter().zip(&self.k) {
            let q = f.linear(x, lq);
            let k = f.linear(x, lk);
            let s = f.g.block_scores(q, k, period, scale);
            let a = f.g.causal_softmax(s, period);
            match &mut avg_attn {
                Some(m) => m.add_assign(f.g.value(a)),
                None => avg_attn = Some(f.g.value(a).clone()),
            }
            let h = f.g.block_apply(a, v, period);
            acc = Some(match acc {
                Some(c) => f.g.add(c, h),
                None => h,
            });
        }
        let n = self.q.len() as f64;
        let mean = f.g.affine(acc.expect("at least one head"), 1.0 / n, 0.0);
        let mut attn = avg_attn.expect("at least one head");
        attn.scale_assign(1.0 / n);
        (f.linear(mean, &self.out), attn)
    }
}

/// Standard multi-head attention with per-head value projections, heads concatenated.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub out: Linear,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, d: usize, n_heads: usize) -> Self {
        let d_head = d / n_heads;
        let heads = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, which: &str| -> Vec<Linear> {
            (0..n_heads)
                .map(|h| Linear::new(store, rng, &format!("{name}.{which}{h}"), d, d_head, false))
                .collect()
        };
        let q = heads(store, rng, "q");
        let k = heads(store, rng, "k");
        let v = heads(store, rng, "v");
        MultiHeadAttention {
            q,
            k,
            v,
            out: Linear::new(store, rng, &format!("{name}.out"), d_head * n_heads, d, true),
            d_head,
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var, period: usize) -> Var {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.q.len());
        for ((lq, lk), lv) in self.q.iter().zip(&self.k).zip(&self.v) {
            let q = f.linear(x, lq);
            let k = f.linear(x, lk);
            let v = f.linear(x, lv);
            let s = f.g.block_scores(q, k, period, scale);
            let a = f.g.causal_softmax(s, period);
            heads.push(f.g.block_apply(a, v, period));
        }
        let cat = f.g.concat_cols(&heads);
        f.linear(cat, &self.out)
    }
}

/// Sigmoid trigger head (`n_channels` outputs) and linear quantile head (`n_channels * n_quantiles`).
#[derive(Debug, Clone)]
pub struct OutputHeads {
    pub trigger: Linear,
    pub quantile: Linear,
}

impl OutputHeads {
    pub fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, d: usize, n_channels: usize, n_quantiles: usize) -> Self {
        OutputHeads {
            trigger: Linear::new(store, rng, "head.trigger", d, n_channels, true),
            quantile: Linear::new(store, rng, "head.quantile", d, n_channels * n_quantiles, true),
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var) -> (Var, Var) {
        let logits = f.linear(x, &self.trigger);
        let probs = f.g.sigmoid(logits);
        let q = f.linear(x, &self.quantile);
        (probs, q)
    }
}
