//! AdamW and the mini-batch training loop.
//!
//! Each batch is split into fixed-size chunks whose gradients are computed
//! independently (in parallel when threads are available) and summed in chunk
//! order, so results do not depend on the thread count. Shuffling and dropout
//! draw from generators seeded by `(seed, epoch, batch)`, which makes a
//! resumed run continue exactly like an uninterrupted one.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{NormalizationStats, SampleWindow};
use crate::loss::{loss_and_grad, loss_with, LossBreakdown, LossConfig, Normalizers, Targets, TriggerWeighting};
use crate::model::{Batch, Mode, Model, ModelConfig, ModelKind, ModelOutput, ParameterStore};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub weighting: TriggerWeighting,
    /// Windows per gradient chunk.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 64,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: None,
            seed: 0,
            model_kind: ModelKind::Tft,
            weighting: TriggerWeighting::Uniform,
            chunk_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch and chunk sizes must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip norm must be positive");
        }
        Ok(())
    }
}

/// Adam moments for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update from `params.grads`: `p -= lr * wd * p`, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut ParameterStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in params.names.iter().zip(&params.grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..params.tensors.len() {
        let p = &mut params.tensors[i].data;
        let g = &params.grads[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..p.len() {
            p[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    if let Some(i) = params.tensors.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("parameter `{}` after update", params.names[i])));
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = params.grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in &mut params.grads {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub split: String,
    pub mode: Mode,
    pub l_prob: f64,
    pub l_quantile: f64,
    pub l_total: f64,
    pub n_active: usize,
    pub wall_time: f64,
}

/// Mixes a seed with stream indices into an independent generator seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x5851_F42D_4C95_7F2D;
    for p in parts {
        x = x.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        x ^= x >> 30;
        x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Training inputs stacked per window.
pub fn targets_for(windows: &[&SampleWindow]) -> Targets {
    let t = windows.first().map_or(0, |w| w.target_loads.rows);
    let c = windows.first().map_or(0, |w| w.target_loads.cols);
    let mut loads = Mat::zeros(windows.len() * t, c);
    let mut triggers = Mat::zeros(windows.len() * t, c);
    for (b, w) in windows.iter().enumerate() {
        loads.data[b * t * c..(b + 1) * t * c].copy_from_slice(&w.target_loads.data);
        triggers.data[b * t * c..(b + 1) * t * c].copy_from_slice(&w.trigger_targets.data);
    }
    Targets { loads, triggers }
}

fn sum_breakdowns(parts: &[LossBreakdown]) -> LossBreakdown {
    let (mut p, mut q, mut n) = (0.0, 0.0, 0);
    for b in parts {
        p += b.l_prob;
        q += b.l_quantile;
        n += b.n_active;
    }
    LossBreakdown::new(p, q, n)
}

/// Eval-mode predictions for `windows`, chunked, in window order.
pub fn predict_windows(model: &Model, windows: &[&SampleWindow], chunk: usize) -> Result<Vec<ModelOutput>> {
    windows
        .par_chunks(chunk.max(1))
        .map(|c| model.predict(&Batch::from_windows(c)))
        .collect()
}

/// Eval-mode loss over a whole split, normalized over the split.
pub fn evaluate_loss(model: &Model, windows: &[SampleWindow], loss_cfg: &LossConfig, chunk: usize) -> Result<LossBreakdown> {
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    let norm = Normalizers::from_triggers(refs.iter().map(|w| &w.trigger_targets), loss_cfg.weighting);
    let parts: Vec<LossBreakdown> = refs
        .par_chunks(chunk.max(1))
        .map(|c| {
            let out = model.predict(&Batch::from_windows(c))?;
            loss_with(&targets_for(c), &out.trigger_probs, &out.quantile_proj, loss_cfg, &norm)
        })
        .collect::<Result<_>>()?;
    Ok(sum_breakdowns(&parts))
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainRun {
    /// Model after the last epoch.
    pub model: Model,
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Every entry, including those from before a resume.
    pub log: Vec<TrainLogEntry>,
}

pub struct Trainer<'a> {
    pub train: &'a [SampleWindow],
    pub val: &'a [SampleWindow],
    pub stats: &'a NormalizationStats,
    pub cfg: TrainConfig,
    /// Where to write the log and the checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

impl Trainer<'_> {
    /// Trains from scratch, or continues `resume` up to `cfg.epochs` completed epochs.
    pub fn run(&self, model_cfg: &ModelConfig, resume: Option<Checkpoint>) -> Result<TrainRun> {
        self.cfg.validate()?;
        model_cfg.validate()?;
        if self.train.is_empty() {
            return Err(Error::Config("the train split has no windows".into()));
        }
        let loss_cfg = LossConfig {
            quantiles: model_cfg.quantiles.clone(),
            weighting: self.cfg.weighting,
        };

        let (mut model, mut opt, start_epoch, mut best, mut log) = match resume {
            Some(ck) => {
                ck.ensure_compatible(self.cfg.model_kind, model_cfg)?;
                ck.stats.matches(self.stats, 1e-12)?;
                let model = ck.to_model()?;
                let opt = ck
                    .optimizer
                    .clone()
                    .ok_or_else(|| Error::State("checkpoint has no optimizer state to resume from".into()))?;
                let log = match &self.out_dir {
                    Some(dir) => read_log(&dir.join(LOG_FILE), ck.epoch)?,
                    None => Vec::new(),
                };
                let best = match &self.out_dir {
                    Some(dir) if dir.join(BEST_CHECKPOINT).exists() => Checkpoint::load(dir.join(BEST_CHECKPOINT))?,
                    _ => ck.clone(),
                };
                (model, opt, ck.epoch, best, log)
            }
            None => {
                let model = Model::new(self.cfg.model_kind, model_cfg.clone())?;
                let opt = AdamState::new(&model.params);
                let ck = Checkpoint::from_model(&model, self.stats);
                (model, opt, 0, ck, Vec::new())
            }
        };
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            rewrite_log(&dir.join(LOG_FILE), &log)?;
        }

        let started = Instant::now();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for epoch in start_epoch + 1..=self.cfg.epochs {
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[epoch as u64])));
            let mut parts = Vec::new();
            for (bi, batch_idx) in order.chunks(self.cfg.batch_size).enumerate() {
                let b = self
                    .train_batch(&mut model, &mut opt, &loss_cfg, batch_idx, epoch, bi)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::Divergence {
                            epoch,
                            batch: bi,
                            message: m,
                        },
                        e => e,
                    })?;
                parts.push(b);
            }
            let n = parts.len() as f64;
            let mean = LossBreakdown::new(
                parts.iter().map(|b| b.l_prob).sum::<f64>() / n,
                parts.iter().map(|b| b.l_quantile).sum::<f64>() / n,
                parts.iter().map(|b| b.n_active).sum(),
            );
            let mut entries = vec![entry(epoch, "train", Mode::Train, &mean, &started)];
            let score = if self.val.is_empty() {
                mean.l_total
            } else {
                let v = evaluate_loss(&model, self.val, &loss_cfg, self.cfg.chunk_size)?;
                entries.push(entry(epoch, "val", Mode::Eval, &v, &started));
                v.l_total
            };
            if !score.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: parts.len(),
                    message: "non-finite validation loss".into(),
                });
            }
            for e in &entries {
                log::info!(
                    "epoch {:>4} {:<5} l_prob {:.6} l_quantile {:.6} l_total {:.6}",
                    e.epoch,
                    e.split,
                    e.l_prob,
                    e.l_quantile,
                    e.l_total
                );
            }

            let mut last = Checkpoint::from_model(&model, self.stats);
            last.optimizer = Some(opt.clone());
            last.train_cfg = Some(self.cfg.clone());
            last.epoch = epoch;
            let improved = best.best_score.is_none_or(|b| score < b);
            if improved {
                last.best_epoch = Some(epoch);
                last.best_score = Some(score);
                best = last.clone();
            } else {
                last.best_epoch = best.best_epoch;
                last.best_score = best.best_score;
            }
            if let Some(dir) = &self.out_dir {
                append_log(&dir.join(LOG_FILE), &entries)?;
                if improved {
                    best.save(dir.join(BEST_CHECKPOINT))?;
                }
                last.save(dir.join(LAST_CHECKPOINT))?;
            }
            log.extend(entries);
        }

        let mut last = Checkpoint::from_model(&model, self.stats);
        last.optimizer = Some(opt);
        last.train_cfg = Some(self.cfg.clone());
        last.epoch = self.cfg.epochs.max(start_epoch);
        last.best_epoch = best.best_epoch;
        last.best_score = best.best_score;
        model.clear_tape();
        Ok(TrainRun {
            model,
            best,
            last,
            log,
        })
    }

    fn train_batch(
        &self,
        model: &mut Model,
        opt: &mut AdamState,
        loss_cfg: &LossConfig,
        batch_idx: &[usize],
        epoch: usize,
        batch: usize,
    ) -> Result<LossBreakdown> {
        let windows: Vec<&SampleWindow> = batch_idx.iter().map(|i| &self.train[*i]).collect();
        let norm = Normalizers::from_triggers(windows.iter().map(|w| &w.trigger_targets), loss_cfg.weighting);
        let frozen: &Model = model;
        let results: Vec<(LossBreakdown, Vec<(usize, Mat)>)> = windows
            .par_chunks(self.cfg.chunk_size)
            .enumerate()
            .map(|(ci, chunk)| {
                let seed = derive_seed(self.cfg.seed, &[epoch as u64, batch as u64, ci as u64]);
                let (tape, out) = frozen.record(&Batch::from_windows(chunk), Mode::Train, seed)?;
                let (b, dp, dq) = loss_and_grad(&targets_for(chunk), &out.trigger_probs, &out.quantile_proj, loss_cfg, &norm)?;
                Ok((b, tape.backward(&dp, &dq)?.grads))
            })
            .collect::<Result<_>>()?;
        model.params.zero_grads();
        let mut parts = Vec::with_capacity(results.len());
        for (b, g) in &results {
            model.params.accumulate(g, 1.0);
            parts.push(*b);
        }
        let total = sum_breakdowns(&parts);
        if !total.l_total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if let Some(c) = self.cfg.grad_clip_norm {
            clip_grad_norm(&mut model.params, c);
        }
        adamw_step(&mut model.params, opt, &self.cfg)?;
        Ok(total)
    }
}

fn entry(epoch: usize, split: &str, mode: Mode, b: &LossBreakdown, started: &Instant) -> TrainLogEntry {
    TrainLogEntry {
        epoch,
        split: split.into(),
        mode,
        l_prob: b.l_prob,
        l_quantile: b.l_quantile,
        l_total: b.l_total,
        n_active: b.n_active,
        wall_time: started.elapsed().as_secs_f64(),
    }
}

/// Reads log entries with `epoch <= max_epoch`.
pub fn read_log(path: &Path, max_epoch: usize) -> Result<Vec<TrainLogEntry>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TrainLogEntry = serde_json::from_str(&line)?;
        if e.epoch <= max_epoch {
            out.push(e);
        }
    }
    Ok(out)
}

fn rewrite_log(path: &Path, entries: &[TrainLogEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    crate::dataio::write_atomic(path, &buf)
}

fn append_log(path: &Path, entries: &[TrainLogEntry]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;

    fn scalar_store(p: f64, g: f64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        s.add("p", 1, 1, Init::Constant(p), &mut rng);
        s.grads[0].data[0] = g;
        s
    }

    #[test]
    fn adamw_scalar_fixture() {
        // lr 0.1, g 0.5, m = v = 0: m_hat = 0.5, v_hat = 0.25,
        // p = 1 - 0.1 * 0.5 / (0.5 + 1e-8) = 0.90000000199999996.
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = scalar_store(1.0, 0.5);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &mut st, &cfg).unwrap();
        assert!((s.tensors[0].data[0] - 0.900000002).abs() < 1e-15);
        assert_eq!(st.step, 1);
        assert!((st.m[0].data[0] - 0.05).abs() < 1e-15);
        assert!((st.v[0].data[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = scalar_store(2.5, 0.0);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &mut st, &cfg).unwrap();
        assert_eq!(s.tensors[0].data[0], 2.5);

        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..cfg
        };
        let mut s = scalar_store(2.5, 0.0);
        adamw_step(&mut s, &mut st, &cfg).unwrap();
        assert!((s.tensors[0].data[0] - (2.5 - 0.01 * 0.1 * 2.5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut st = AdamState::new(&s);
        let err = adamw_step(&mut s, &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = scalar_store(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.add("q", 1, 1, Init::Zeros, &mut rng);
        s.grads[0].data[0] = 3.0;
        s.grads[1].data[0] = 4.0;
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grads[0].data[0] - 0.6).abs() < 1e-15);
        assert!((s.grads[1].data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[1, 0]);
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(2, &[1, 0]));
        assert_eq!(a, derive_seed(1, &[1, 0]));
    }
}
