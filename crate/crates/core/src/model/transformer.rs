use rand_chacha::ChaCha8Rng;

use super::layers::{Fwd, LayerNormParams, Linear, MultiHeadAttention, OutputHeads};
use super::params::Init;
use super::{Forward, ModelConfig, ParameterStore};
use crate::autograd::Var;
use crate::Result;

/// Single post-norm encoder layer with a causal mask and learned positions.
#[derive(Debug, Clone)]
pub struct Transformer {
    input: Linear,
    position: usize,
    attention: MultiHeadAttention,
    ln1: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNormParams,
    heads: OutputHeads,
}

impl Transformer {
    pub fn new(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Transformer {
            input: Linear::new(store, rng, "input", cfg.n_temporal + cfg.n_static, d, true),
            position: store.add("position", cfg.seq_len, d, Init::FanIn, rng),
            attention: MultiHeadAttention::new(store, rng, "attention", d, cfg.n_heads),
            ln1: LayerNormParams::new(store, rng, "ln1", d),
            ff1: Linear::new(store, rng, "ff1", d, 2 * d, true),
            ff2: Linear::new(store, rng, "ff2", 2 * d, d, true),
            ln2: LayerNormParams::new(store, rng, "ln2", d),
            heads: OutputHeads::new(store, rng, d, cfg.n_channels, cfg.n_quantiles()),
        }
    }

    pub(crate) fn forward(&self, f: &mut Fwd, cfg: &ModelConfig, x_static: Var, x_weather: Var) -> Result<Forward> {
        let t = cfg.seq_len;
        let b = f.g.value(x_static).rows;
        let s = f.g.repeat_each(x_static, t);
        let x = f.g.concat_cols(&[x_weather, s]);
        let x = f.linear(x, &self.input);
        let pos = f.p(self.position);
        let pos = f.g.tile(pos, b);
        let x = f.g.add(x, pos);

        let a = self.attention.apply(f, x, t);
        let a = f.dropout(a);
        let x = f.g.add(x, a);
        let x = f.layer_norm(x, &self.ln1);
        f.check(x, "encoder attention")?;

        let h = f.linear(x, &self.ff1);
        let h = f.g.relu(h);
        let h = f.linear(h, &self.ff2);
        let h = f.dropout(h);
        let x2 = f.g.add(x, h);
        let x2 = f.layer_norm(x2, &self.ln2);
        f.check(x2, "encoder feed-forward")?;

        let (probs, quantiles) = self.heads.apply(f, x2);
        Ok(Forward {
            probs,
            quantiles,
            attention: None,
            static_weights: None,
            temporal_weights: None,
        })
    }
}
