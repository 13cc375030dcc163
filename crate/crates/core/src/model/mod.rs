//! The temporal fusion network and the two baselines.
//!
//! All networks consume a [`Batch`] of `B` windows flattened to `B * seq_len`
//! rows and produce one output row per (window, step).

pub mod layers;
pub mod params;
mod rnn;
mod tft;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, Var};
use crate::dataio::{SampleWindow, N_CHANNELS, N_STATIC, N_TEMPORAL, SEQ_LEN};
use crate::tensor::Mat;
use crate::{Error, Result};
use layers::Fwd;
pub use params::{Init, ParameterStore};
pub use rnn::Rnn;
pub use tft::Tft;
pub use transformer::Transformer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
    pub n_static: usize,
    pub n_temporal: usize,
    pub seq_len: usize,
    pub n_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            dropout: 0.1,
            quantiles: vec![0.1, 0.5, 0.9],
            n_static: N_STATIC,
            n_temporal: N_TEMPORAL,
            seq_len: SEQ_LEN,
            n_channels: N_CHANNELS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "quantiles {:?} must be sorted, unique and inside (0, 1)",
                self.quantiles
            ));
        }
        if self.median_index().is_none() {
            return bad("quantiles must include 0.5".into());
        }
        if self.n_static == 0 || self.n_temporal == 0 || self.seq_len == 0 || self.n_channels == 0 {
            return bad("variable counts and seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn n_quantiles(&self) -> usize {
        self.quantiles.len()
    }

    pub fn median_index(&self) -> Option<usize> {
        self.quantiles.iter().position(|q| *q == 0.5)
    }

    /// Column of quantile `qi` for channel `c` in the quantile projection.
    pub fn quantile_col(&self, c: usize, qi: usize) -> usize {
        c * self.n_quantiles() + qi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tft,
    Rnn,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Tft, ModelKind::Rnn, ModelKind::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tft => "tft",
            ModelKind::Rnn => "rnn",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tft" | "citytft" => Ok(ModelKind::Tft),
            "rnn" | "gru" => Ok(ModelKind::Rnn),
            "transformer" => Ok(ModelKind::Transformer),
            _ => Err(Error::Config(format!(
                "unknown model kind `{s}` (expected tft, rnn or transformer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inputs of `B` windows: static covariates `B x n_static` and weather `B*T x n_temporal`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub static_x: Mat,
    pub weather: Mat,
}

impl Batch {
    pub fn from_windows(windows: &[&SampleWindow]) -> Self {
        let n_static = windows.first().map_or(N_STATIC, |w| w.static_covariates.len());
        let n_temporal = windows.first().map_or(N_TEMPORAL, |w| w.weather.cols);
        let t = windows.first().map_or(SEQ_LEN, |w| w.weather.rows);
        let mut static_x = Mat::zeros(windows.len(), n_static);
        let mut weather = Mat::zeros(windows.len() * t, n_temporal);
        for (b, w) in windows.iter().enumerate() {
            static_x.row_mut(b).copy_from_slice(&w.static_covariates);
            weather.data[b * t * n_temporal..(b + 1) * t * n_temporal].copy_from_slice(&w.weather.data);
        }
        Batch { static_x, weather }
    }

    pub fn single(static_x: &[f64], weather: &Mat) -> Self {
        Batch {
            static_x: Mat::from_vec(1, static_x.len(), static_x.to_vec()),
            weather: weather.clone(),
        }
    }

    pub fn n_windows(&self) -> usize {
        self.static_x.rows
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.static_x.rows;
        if self.static_x.cols != cfg.n_static {
            return Err(Error::Shape(format!(
                "static input has {} columns, expected {}",
                self.static_x.cols, cfg.n_static
            )));
        }
        if self.weather.shape() != (b * cfg.seq_len, cfg.n_temporal) {
            return Err(Error::Shape(format!(
                "weather input is {:?}, expected ({}, {})",
                self.weather.shape(),
                b * cfg.seq_len,
                cfg.n_temporal
            )));
        }
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if !self.static_x.is_finite() || !self.weather.is_finite() {
            return Err(Error::NonFinite("model inputs".into()));
        }
        Ok(())
    }
}

/// Network outputs, one row per (window, step).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `rows x n_channels`, each strictly inside (0, 1).
    pub trigger_probs: Mat,
    /// `rows x n_channels * n_quantiles`; column `c * n_quantiles + qi`.
    pub quantile_proj: Mat,
    /// Head-averaged attention weights `rows x seq_len` (temporal fusion network only).
    pub attention: Option<Mat>,
    /// Static selection weights `B x n_static` (temporal fusion network only).
    pub static_weights: Option<Mat>,
    /// Temporal selection weights `rows x n_temporal` (temporal fusion network only).
    pub temporal_weights: Option<Mat>,
}

impl ModelOutput {
    pub fn rows(&self) -> usize {
        self.trigger_probs.rows
    }
}

/// A recorded forward pass that can be differentiated.
#[derive(Debug)]
pub struct Tape {
    graph: Graph,
    probs: Var,
    quantiles: Var,
}

impl Tape {
    /// Gradients of every parameter given the gradients of the loss
    /// with respect to the trigger probabilities and the quantile projections.
    pub fn backward(&self, d_probs: &Mat, d_quantiles: &Mat) -> Result<ParamGrads> {
        for (name, v, g) in [("trigger", self.probs, d_probs), ("quantile", self.quantiles, d_quantiles)] {
            if self.graph.value(v).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "{name} gradient is {:?}, output is {:?}",
                    g.shape(),
                    self.graph.value(v).shape()
                )));
            }
        }
        Ok(self
            .graph
            .backward(&[(self.probs, d_probs), (self.quantiles, d_quantiles)]))
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Network {
    Tft(Tft),
    Rnn(Rnn),
    Transformer(Transformer),
}

pub(crate) struct Forward {
    pub probs: Var,
    pub quantiles: Var,
    pub attention: Option<Mat>,
    pub static_weights: Option<Var>,
    pub temporal_weights: Option<Var>,
}

/// A network with its parameters and, after a forward pass, the retained tape.
#[derive(Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub params: ParameterStore,
    net: Network,
    tape: Option<Tape>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            kind: self.kind,
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            net: self.net.clone(),
            tape: None,
        }
    }
}

impl Model {
    /// Builds the network and initializes parameters deterministically from `cfg.seed`:
    /// weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero, layer-norm gains one.
    pub fn new(kind: ModelKind, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParameterStore::new();
        let net = match kind {
            ModelKind::Tft => Network::Tft(Tft::new(&cfg, &mut params, &mut rng)),
            ModelKind::Rnn => Network::Rnn(Rnn::new(&cfg, &mut params, &mut rng)),
            ModelKind::Transformer => Network::Transformer(Transformer::new(&cfg, &mut params, &mut rng)),
        };
        Ok(Model {
            kind,
            cfg,
            params,
            net,
            tape: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records a forward pass without touching the model. In training mode
    /// dropout masks are drawn from `dropout_seed`.
    pub fn record(&self, batch: &Batch, mode: Mode, dropout_seed: u64) -> Result<(Tape, ModelOutput)> {
        batch.validate(&self.cfg)?;
        let dropout = (mode == Mode::Train)
            .then(|| (self.cfg.dropout, ChaCha8Rng::seed_from_u64(dropout_seed)));
        let mut f = Fwd::new(&self.params, dropout);
        let x_static = f.g.constant(batch.static_x.clone());
        let x_weather = f.g.constant(batch.weather.clone());
        let out = match &self.net {
            Network::Tft(n) => n.forward(&mut f, &self.cfg, x_static, x_weather)?,
            Network::Rnn(n) => n.forward(&mut f, &self.cfg, x_static, x_weather)?,
            Network::Transformer(n) => n.forward(&mut f, &self.cfg, x_static, x_weather)?,
        };
        f.check(out.probs, "trigger head")?;
        f.check(out.quantiles, "quantile head")?;
        let g = f.g;
        let output = ModelOutput {
            trigger_probs: g.value(out.probs).clone(),
            quantile_proj: g.value(out.quantiles).clone(),
            attention: out.attention,
            static_weights: out.static_weights.map(|v| g.value(v).clone()),
            temporal_weights: out.temporal_weights.map(|v| g.value(v).clone()),
        };
        Ok((
            Tape {
                graph: g,
                probs: out.probs,
                quantiles: out.quantiles,
            },
            output,
        ))
    }

    /// Dropout-free inference.
    pub fn predict(&self, batch: &Batch) -> Result<ModelOutput> {
        self.record(batch, Mode::Eval, 0).map(|(_, o)| o)
    }

    /// Forward pass that retains the tape for a later [`Model::backward`].
    pub fn forward(&mut self, batch: &Batch, mode: Mode, dropout_seed: u64) -> Result<ModelOutput> {
        let (tape, out) = self.record(batch, mode, dropout_seed)?;
        self.tape = Some(tape);
        Ok(out)
    }

    /// Overwrites the gradient buffers with the gradients of the last forward pass.
    pub fn backward(&mut self, d_probs: &Mat, d_quantiles: &Mat) -> Result<()> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let grads = tape.backward(d_probs, d_quantiles)?;
        self.params.zero_grads();
        self.params.accumulate(&grads.grads, 1.0);
        for (name, g) in self.params.names.iter().zip(&self.params.grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(())
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }
}

#[cfg(test)]
mod tests;
