use rand_chacha::ChaCha8Rng;

use super::layers::{Context, Fwd, GateAddNorm, Grn, InterpretableAttention, OutputHeads, ScalarEmbeddings, VariableSelection};
use super::{Forward, ModelConfig, ParameterStore};
use crate::autograd::Var;
use crate::Result;

/// Encoder-only temporal fusion network.
#[derive(Debug, Clone)]
pub struct Tft {
    static_embed: ScalarEmbeddings,
    temporal_embed: ScalarEmbeddings,
    static_vsn: VariableSelection,
    ctx_selection: Grn,
    ctx_enrichment: Grn,
    temporal_vsn: VariableSelection,
    enrichment: Grn,
    attention: InterpretableAttention,
    post_attention: GateAddNorm,
    positionwise: Grn,
    output_gate: GateAddNorm,
    heads: OutputHeads,
}

impl Tft {
    pub fn new(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Tft {
            static_embed: ScalarEmbeddings::new(store, rng, "static_embed", cfg.n_static, d),
            temporal_embed: ScalarEmbeddings::new(store, rng, "temporal_embed", cfg.n_temporal, d),
            static_vsn: VariableSelection::new(store, rng, "static_vsn", cfg.n_static, d, None),
            ctx_selection: Grn::new(store, rng, "ctx_selection", d, d, d, None),
            ctx_enrichment: Grn::new(store, rng, "ctx_enrichment", d, d, d, None),
            temporal_vsn: VariableSelection::new(store, rng, "temporal_vsn", cfg.n_temporal, d, Some(d)),
            enrichment: Grn::new(store, rng, "enrichment", d, d, d, Some(d)),
            attention: InterpretableAttention::new(store, rng, "attention", d, cfg.n_heads),
            post_attention: GateAddNorm::new(store, rng, "post_attention", d),
            positionwise: Grn::new(store, rng, "positionwise", d, d, d, None),
            output_gate: GateAddNorm::new(store, rng, "output_gate", d),
            heads: OutputHeads::new(store, rng, d, cfg.n_channels, cfg.n_quantiles()),
        }
    }

    /// Static covariates to `(selection context, enrichment context, static weights)`, one row per window.
    pub(crate) fn static_encoder(&self, f: &mut Fwd, x_static: Var) -> Result<(Var, Var, Var)> {
        let emb = self.static_embed.apply(f, x_static);
        let (s, w) = self.static_vsn.apply(f, &emb, None);
        f.check(s, "static selection")?;
        let c_sel = self.ctx_selection.apply(f, s, None);
        let c_enr = self.ctx_enrichment.apply(f, s, None);
        f.check(c_sel, "selection context")?;
        f.check(c_enr, "enrichment context")?;
        Ok((c_sel, c_enr, w))
    }

    pub(crate) fn forward(&self, f: &mut Fwd, cfg: &ModelConfig, x_static: Var, x_weather: Var) -> Result<Forward> {
        let t = cfg.seq_len;
        let (c_sel, c_enr, static_w) = self.static_encoder(f, x_static)?;

        let emb = self.temporal_embed.apply(f, x_weather);
        let (x, temporal_w) = self.temporal_vsn.apply(f, &emb, Some(Context::PerWindow(c_sel, t)));
        f.check(x, "temporal selection")?;

        let enriched = self.enrichment.apply(f, x, Some(Context::PerWindow(c_enr, t)));
        f.check(enriched, "static enrichment")?;

        let (att, weights) = self.attention.apply(f, enriched, t);
        let att = f.dropout(att);
        let h = f.gated_add_norm(att, enriched, &self.post_attention);
        f.check(h, "attention")?;

        let p = self.positionwise.apply(f, h, None);
        let out = f.gated_add_norm(p, x, &self.output_gate);
        f.check(out, "position-wise")?;

        let (probs, quantiles) = self.heads.apply(f, out);
        Ok(Forward {
            probs,
            quantiles,
            attention: Some(weights),
            static_weights: Some(static_w),
            temporal_weights: Some(temporal_w),
        })
    }
}
