use rand_chacha::ChaCha8Rng;

use super::layers::{Fwd, Linear, OutputHeads};
use super::{Forward, ModelConfig, ParameterStore};
use crate::autograd::Var;
use crate::tensor::Mat;
use crate::Result;

const N_LAYERS: usize = 2;

/// One GRU layer. Input and recurrent projections are fused over the
/// update, reset and candidate gates (in that column order).
#[derive(Debug, Clone)]
struct GruLayer {
    input: Linear,
    recurrent: Linear,
}

impl GruLayer {
    /// Runs the layer over `x` (`B*T x d_in`) and returns the hidden states (`B*T x d`).
    fn apply(&self, f: &mut Fwd, x: Var, t: usize, d: usize) -> Var {
        let xp = f.linear(x, &self.input);
        let b = f.g.value(x).rows / t;
        let mut h = f.g.constant(Mat::zeros(b, d));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let xs = f.g.gather_rows(xp, t, step);
            let hs = f.linear(h, &self.recurrent);
            let xz = f.g.slice_cols(xs, 0, 2 * d);
            let hz = f.g.slice_cols(hs, 0, 2 * d);
            let zr = f.g.add(xz, hz);
            let zr = f.g.sigmoid(zr);
            let z = f.g.slice_cols(zr, 0, d);
            let r = f.g.slice_cols(zr, d, d);
            let xn = f.g.slice_cols(xs, 2 * d, d);
            let hn = f.g.slice_cols(hs, 2 * d, d);
            let rhn = f.g.mul(r, hn);
            let n = f.g.add(xn, rhn);
            let n = f.g.tanh(n);
            // h' = n + z * (h - n)
            let neg_n = f.g.affine(n, -1.0, 0.0);
            let diff = f.g.add(h, neg_n);
            let zd = f.g.mul(z, diff);
            h = f.g.add(n, zd);
            states.push(h);
        }
        f.g.interleave(&states)
    }
}

/// Two stacked GRU layers over weather with the static covariates appended at every step.
#[derive(Debug, Clone)]
pub struct Rnn {
    layers: Vec<GruLayer>,
    heads: OutputHeads,
}

impl Rnn {
    pub fn new(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let layers = (0..N_LAYERS)
            .map(|l| {
                let d_in = if l == 0 { cfg.n_temporal + cfg.n_static } else { d };
                GruLayer {
                    input: Linear::new(store, rng, &format!("gru{l}.input"), d_in, 3 * d, true),
                    recurrent: Linear::new(store, rng, &format!("gru{l}.recurrent"), d, 3 * d, true),
                }
            })
            .collect();
        Rnn {
            layers,
            heads: OutputHeads::new(store, rng, d, cfg.n_channels, cfg.n_quantiles()),
        }
    }

    pub(crate) fn forward(&self, f: &mut Fwd, cfg: &ModelConfig, x_static: Var, x_weather: Var) -> Result<Forward> {
        let t = cfg.seq_len;
        let s = f.g.repeat_each(x_static, t);
        let mut h = f.g.concat_cols(&[x_weather, s]);
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(f, h, t, cfg.d_model);
            if l + 1 < self.layers.len() {
                h = f.dropout(h);
            }
            f.check(h, &format!("gru layer {l}"))?;
        }
        let (probs, quantiles) = self.heads.apply(f, h);
        Ok(Forward {
            probs,
            quantiles,
            attention: None,
            static_weights: None,
            temporal_weights: None,
        })
    }
}
