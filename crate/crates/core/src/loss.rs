//! Trigger cross-entropy plus masked pinball loss.
//!
//! Both terms are averages: the trigger term over every (step, channel) pair,
//! the quantile term over active pairs times quantiles. When a batch is split
//! into chunks, [`Normalizers`] computed over the whole batch keep the chunk
//! gradients summable.

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerWeighting {
    #[default]
    Uniform,
    /// `w = N / (2 * N_class)` for each class, counted over the batch.
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub quantiles: Vec<f64>,
    pub weighting: TriggerWeighting,
}

impl LossConfig {
    pub fn new(quantiles: Vec<f64>) -> Self {
        LossConfig {
            quantiles,
            weighting: TriggerWeighting::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "quantiles {:?} must be sorted, unique and inside (0, 1)",
                self.quantiles
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_prob: f64,
    pub l_quantile: f64,
    pub l_total: f64,
    pub n_active: usize,
}

impl LossBreakdown {
    pub fn new(l_prob: f64, l_quantile: f64, n_active: usize) -> Self {
        LossBreakdown {
            l_prob,
            l_quantile,
            l_total: l_prob + l_quantile,
            n_active,
        }
    }
}

/// Targets for `rows` steps: normalized signed loads and 0/1 triggers, both `rows x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub loads: Mat,
    pub triggers: Mat,
}

/// Batch-wide counts and class weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub n_pairs: usize,
    pub n_active: usize,
    /// Weights for negative and positive trigger targets.
    pub class_weights: [f64; 2],
}

impl Normalizers {
    pub fn from_triggers<'a>(triggers: impl IntoIterator<Item = &'a Mat>, weighting: TriggerWeighting) -> Self {
        let (mut n, mut pos) = (0usize, 0usize);
        for t in triggers {
            n += t.len();
            pos += t.data.iter().filter(|v| **v == 1.0).count();
        }
        let neg = n - pos;
        let class_weights = match weighting {
            TriggerWeighting::Uniform => [1.0, 1.0],
            TriggerWeighting::ClassBalanced => {
                let w = |k: usize| if k == 0 { 1.0 } else { n as f64 / (2.0 * k as f64) };
                [w(neg), w(pos)]
            }
        };
        Normalizers {
            n_pairs: n,
            n_active: pos,
            class_weights,
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `(1/N) sum -w_n [t_n ln p_n + (1 - t_n) ln(1 - p_n)]`.
pub fn trigger_loss(t: &[f64], p: &[f64], w: &[f64]) -> Result<f64> {
    if t.len() != p.len() || t.len() != w.len() {
        return Err(Error::Shape(format!(
            "trigger loss lengths differ: t {}, p {}, w {}",
            t.len(),
            p.len(),
            w.len()
        )));
    }
    if t.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = t
        .iter()
        .zip(p)
        .zip(w)
        .map(|((t, p), w)| {
            let p = clamp_prob(*p);
            -w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / t.len() as f64)
}

/// Pinball loss of prediction `y` for actual `a` at quantile `q`.
pub fn pinball(q: f64, a: f64, y: f64) -> f64 {
    if y <= a {
        q * (a - y)
    } else {
        (1.0 - q) * (y - a)
    }
}

/// Derivative of [`pinball`] with respect to `y`.
pub fn pinball_grad(q: f64, a: f64, y: f64) -> f64 {
    if y <= a {
        -q
    } else {
        1.0 - q
    }
}

/// Mean pinball loss over masked pairs and all quantiles. `a` and `mask` are
/// `rows x C`, `y` is `rows x C * |q|` with column `c * |q| + qi`. Zero for an empty mask.
pub fn quantile_loss(a: &Mat, y: &Mat, mask: &Mat, q: &[f64]) -> Result<f64> {
    check_quantile_shapes(a, y, mask, q)?;
    let (sum, n) = quantile_sum(a, y, mask, q);
    Ok(if n == 0 { 0.0 } else { sum / (n * q.len()) as f64 })
}

fn check_quantile_shapes(a: &Mat, y: &Mat, mask: &Mat, q: &[f64]) -> Result<()> {
    if a.shape() != mask.shape() || y.rows != a.rows || y.cols != a.cols * q.len() {
        return Err(Error::Shape(format!(
            "quantile loss shapes: actual {:?}, projections {:?}, mask {:?}, {} quantiles",
            a.shape(),
            y.shape(),
            mask.shape(),
            q.len()
        )));
    }
    Ok(())
}

fn quantile_sum(a: &Mat, y: &Mat, mask: &Mat, q: &[f64]) -> (f64, usize) {
    let nq = q.len();
    let mut sum = 0.0;
    let mut n = 0;
    for r in 0..a.rows {
        for c in 0..a.cols {
            if mask.get(r, c) != 1.0 {
                continue;
            }
            n += 1;
            let av = a.get(r, c);
            for (qi, qv) in q.iter().enumerate() {
                sum += pinball(*qv, av, y.get(r, c * nq + qi));
            }
        }
    }
    (sum, n)
}

fn check_targets(targets: &Targets, probs: &Mat, proj: &Mat, nq: usize) -> Result<()> {
    if targets.loads.shape() != targets.triggers.shape() || probs.shape() != targets.triggers.shape() {
        return Err(Error::Shape(format!(
            "targets {:?}/{:?} do not match trigger output {:?}",
            targets.loads.shape(),
            targets.triggers.shape(),
            probs.shape()
        )));
    }
    if proj.rows != probs.rows || proj.cols != probs.cols * nq {
        return Err(Error::Shape(format!(
            "quantile output {:?} does not match {} channels x {nq} quantiles",
            proj.shape(),
            probs.cols
        )));
    }
    Ok(())
}

/// Loss of one (possibly partial) batch with batch-wide normalizers.
pub fn loss_with(targets: &Targets, probs: &Mat, proj: &Mat, cfg: &LossConfig, norm: &Normalizers) -> Result<LossBreakdown> {
    let q = &cfg.quantiles;
    check_targets(targets, probs, proj, q.len())?;
    let mut lp = 0.0;
    for (t, p) in targets.triggers.data.iter().zip(&probs.data) {
        let p = clamp_prob(*p);
        let w = norm.class_weights[(*t == 1.0) as usize];
        lp -= w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    let (qs, n_active) = quantile_sum(&targets.loads, proj, &targets.triggers, q);
    let l_prob = if norm.n_pairs == 0 { 0.0 } else { lp / norm.n_pairs as f64 };
    let l_quantile = if norm.n_active == 0 {
        0.0
    } else {
        qs / (norm.n_active * q.len()) as f64
    };
    Ok(LossBreakdown::new(l_prob, l_quantile, n_active))
}

/// `l_total = l_prob + l_quantile` over one batch.
pub fn composite_loss(targets: &Targets, probs: &Mat, proj: &Mat, cfg: &LossConfig) -> Result<LossBreakdown> {
    let norm = Normalizers::from_triggers([&targets.triggers], cfg.weighting);
    loss_with(targets, probs, proj, cfg, &norm)
}

/// Loss and its gradients with respect to the probabilities and the projections.
pub fn loss_and_grad(
    targets: &Targets,
    probs: &Mat,
    proj: &Mat,
    cfg: &LossConfig,
    norm: &Normalizers,
) -> Result<(LossBreakdown, Mat, Mat)> {
    let breakdown = loss_with(targets, probs, proj, cfg, norm)?;
    let q = &cfg.quantiles;
    let nq = q.len();
    let mut dp = Mat::zeros(probs.rows, probs.cols);
    if norm.n_pairs > 0 {
        let inv = 1.0 / norm.n_pairs as f64;
        for ((g, t), p) in dp.data.iter_mut().zip(&targets.triggers.data).zip(&probs.data) {
            if *p < PROB_CLAMP || *p > 1.0 - PROB_CLAMP {
                continue;
            }
            let w = norm.class_weights[(*t == 1.0) as usize];
            *g = inv * w * (-t / p + (1.0 - t) / (1.0 - p));
        }
    }
    let mut dq = Mat::zeros(proj.rows, proj.cols);
    if norm.n_active > 0 {
        let inv = 1.0 / (norm.n_active * nq) as f64;
        for r in 0..proj.rows {
            for c in 0..probs.cols {
                if targets.triggers.get(r, c) != 1.0 {
                    continue;
                }
                let a = targets.loads.get(r, c);
                for (qi, qv) in q.iter().enumerate() {
                    let col = c * nq + qi;
                    dq.set(r, col, inv * pinball_grad(*qv, a, proj.get(r, col)));
                }
            }
        }
    }
    Ok((breakdown, dp, dq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn trigger_fixtures() {
        let l = trigger_loss(&[1.0, 0.0, 1.0], &[0.5; 3], &[1.0; 3]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.693147).abs() < 1e-6);
        let l = trigger_loss(&[1.0, 0.0], &[0.9, 0.2], &[1.0, 1.0]).unwrap();
        let hand = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((l - hand).abs() < 1e-15);
        assert!((l - 0.164252).abs() < 1e-6);
        let l = trigger_loss(&[1.0], &[1.0], &[1.0]).unwrap();
        assert!(l < 1e-6 && l >= 0.0);
        let l = trigger_loss(&[1.0], &[0.0], &[1.0]).unwrap();
        assert!((l + PROB_CLAMP.ln()).abs() < 1e-9);
        assert!(trigger_loss(&[1.0], &[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn quantile_fixtures() {
        let one = m(1, 1, &[1.0]);
        assert_eq!(quantile_loss(&m(1, 1, &[10.0]), &m(1, 1, &[8.0]), &one, &[0.5]).unwrap(), 1.0);
        let l = quantile_loss(&m(1, 1, &[10.0]), &m(1, 1, &[12.0]), &one, &[0.9]).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        let zero = Mat::zeros(3, 2);
        let y = m(3, 6, &[5.0; 18]);
        assert_eq!(quantile_loss(&zero, &y, &zero, &[0.1, 0.5, 0.9]).unwrap(), 0.0);
        assert!(quantile_loss(&zero, &Mat::zeros(3, 5), &zero, &[0.1, 0.5, 0.9]).is_err());
    }

    #[test]
    fn composite_is_additive_and_masked() {
        let cfg = LossConfig::new(vec![0.1, 0.5, 0.9]);
        let targets = Targets {
            loads: m(2, 2, &[1.0, 0.0, 0.5, -0.3]),
            triggers: m(2, 2, &[1.0, 0.0, 1.0, 1.0]),
        };
        let probs = m(2, 2, &[0.7, 0.2, 0.6, 0.9]);
        let proj = m(2, 6, &[0.2, 0.9, 1.4, 9.0, 9.0, 9.0, 0.1, 0.4, 0.8, -0.9, -0.2, 0.1]);
        let b = composite_loss(&targets, &probs, &proj, &cfg).unwrap();
        assert_eq!(b.l_total, b.l_prob + b.l_quantile);
        assert_eq!(b.n_active, 3);
        let norm = Normalizers::from_triggers([&targets.triggers], cfg.weighting);
        let (_, _, dq) = loss_and_grad(&targets, &probs, &proj, &cfg, &norm).unwrap();
        assert!(dq.row(0)[3..6].iter().all(|g| *g == 0.0));
        assert_eq!(LossBreakdown::new(0.3, 0.5, 0).l_total, 0.3 + 0.5);

        let perfect = m(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let silent = Targets {
            loads: Mat::zeros(2, 2),
            triggers: Mat::zeros(2, 2),
        };
        let b = composite_loss(&silent, &Mat::zeros(2, 2), &proj, &cfg).unwrap();
        assert!(b.l_total < 1e-6 && b.l_quantile == 0.0);
        let b = composite_loss(&Targets { loads: targets.loads.clone(), triggers: perfect.clone() }, &perfect, &proj, &cfg).unwrap();
        assert!(b.l_prob < 1e-6);
    }

    #[test]
    fn class_balanced_weights() {
        let t = m(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let n = Normalizers::from_triggers([&t], TriggerWeighting::ClassBalanced);
        assert_eq!(n.class_weights, [4.0 / 6.0, 2.0]);
        let n = Normalizers::from_triggers([&t], TriggerWeighting::Uniform);
        assert_eq!(n.class_weights, [1.0, 1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LossConfig {
            quantiles: vec![0.1, 0.5, 0.9],
            weighting: TriggerWeighting::ClassBalanced,
        };
        let targets = Targets {
            loads: m(3, 2, &[1.0, 0.0, 0.5, -0.3, 0.0, -1.2]),
            triggers: m(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]),
        };
        let probs = m(3, 2, &[0.7, 0.2, 0.6, 0.9, 0.35, 0.5]);
        let proj = m(3, 6, &[0.21, 0.9, 1.4, 9.0, 9.0, 9.0, 0.1, 0.43, 0.8, -0.9, -0.2, 0.1, 3.0, 3.0, 3.0, -1.5, -1.1, -0.7]);
        let norm = Normalizers::from_triggers([&targets.triggers], cfg.weighting);
        let (_, dp, dq) = loss_and_grad(&targets, &probs, &proj, &cfg, &norm).unwrap();
        let total = |p: &Mat, y: &Mat| loss_with(&targets, p, y, &cfg, &norm).unwrap().l_total;
        let h = 1e-6;
        for i in 0..probs.len() {
            let (mut up, mut down) = (probs.clone(), probs.clone());
            up.data[i] += h;
            down.data[i] -= h;
            let num = (total(&up, &proj) - total(&down, &proj)) / (2.0 * h);
            assert!((num - dp.data[i]).abs() < 1e-6, "p[{i}]");
        }
        for i in 0..proj.len() {
            let (mut up, mut down) = (proj.clone(), proj.clone());
            up.data[i] += h;
            down.data[i] -= h;
            let num = (total(&probs, &up) - total(&probs, &down)) / (2.0 * h);
            assert!((num - dq.data[i]).abs() < 1e-6, "y[{i}]");
        }
    }

    proptest! {
        #[test]
        fn median_pinball_is_half_mae(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 1..40)
        ) {
            let n = pairs.len();
            let a = Mat::from_vec(n, 1, pairs.iter().map(|p| p.0).collect());
            let y = Mat::from_vec(n, 1, pairs.iter().map(|p| p.1).collect());
            let mask = Mat::from_vec(n, 1, pairs.iter().map(|p| if p.2 { 1.0 } else { 0.0 }).collect());
            let active: Vec<_> = pairs.iter().filter(|p| p.2).collect();
            let mae = if active.is_empty() { 0.0 } else {
                active.iter().map(|p| (p.0 - p.1).abs()).sum::<f64>() / active.len() as f64
            };
            let l = quantile_loss(&a, &y, &mask, &[0.5]).unwrap();
            prop_assert!((l - mae / 2.0).abs() < 1e-9);
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn pinball_slopes(q in 0.01f64..0.99, a in -10.0f64..10.0, d in 0.01f64..5.0) {
            let h = (d / 2.0).min(1e-4);
            for (y, slope) in [(a - d, -q), (a + d, 1.0 - q)] {
                let num = (pinball(q, a, y + h) - pinball(q, a, y - h)) / (2.0 * h);
                prop_assert!((num - slope).abs() < 1e-6);
            }
        }

        #[test]
        fn trigger_loss_nonnegative(ps in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..30)) {
            let t: Vec<f64> = ps.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let p: Vec<f64> = ps.iter().map(|p| p.0).collect();
            let l = trigger_loss(&t, &p, &vec![1.0; t.len()]).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
            let exact = trigger_loss(&t, &t, &vec![1.0; t.len()]).unwrap();
            prop_assert!(exact < 1e-6);
        }
    }
}
