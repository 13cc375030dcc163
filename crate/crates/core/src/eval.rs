//! Prediction assembly and the metric suite.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{is_nonzero_load, BuildingStatic, NormalizationStats, SampleWindow, WeatherSeries, HOURS_PER_YEAR};
use crate::model::{Batch, Model, ModelOutput};
use crate::tensor::Mat;
use crate::train::predict_windows;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const REPORT_CSV_HEADER: [&str; 6] = [
    "model",
    "scope",
    "f1_percent",
    "rmse_nonzero_kwh",
    "rmse_total_kwh",
    "mape_nonzero_percent",
];

/// Per (step, channel) predictions, `rows x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSeries {
    pub trigger_prob: Mat,
    /// Zero wherever the trigger is off, else the denormalized median.
    pub predicted_kwh: Mat,
    pub triggered: Vec<bool>,
    pub actual_kwh: Mat,
}

/// `triggered = p > threshold`; load = median projection in kWh when triggered, else 0.
/// Actual loads are left at zero.
pub fn assemble_prediction(
    output: &ModelOutput,
    quantiles: &[f64],
    stats: &NormalizationStats,
    threshold: f64,
) -> Result<PredictionSeries> {
    let mid = quantiles
        .iter()
        .position(|q| *q == 0.5)
        .ok_or_else(|| Error::Config("the median quantile 0.5 is required to assemble predictions".into()))?;
    let nq = quantiles.len();
    let p = &output.trigger_probs;
    if output.quantile_proj.shape() != (p.rows, p.cols * nq) {
        return Err(Error::Shape(format!(
            "quantile projections {:?} do not match {} channels x {nq} quantiles",
            output.quantile_proj.shape(),
            p.cols
        )));
    }
    let mut predicted = Mat::zeros(p.rows, p.cols);
    let mut triggered = vec![false; p.len()];
    for r in 0..p.rows {
        for c in 0..p.cols {
            if p.get(r, c) > threshold {
                triggered[r * p.cols + c] = true;
                let z = output.quantile_proj.get(r, c * nq + mid);
                predicted.set(r, c, stats.denormalize_load(z, c));
            }
        }
    }
    Ok(PredictionSeries {
        trigger_prob: p.clone(),
        predicted_kwh: predicted,
        triggered,
        actual_kwh: Mat::zeros(p.rows, p.cols),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pred: &[bool], actual: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (p, a) in pred.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// `100 * 2TP / (2TP + FP + FN)`; 100 when there are no positives on either side.
    pub fn f1_percent(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn f1_score(pred: &[bool], actual: &[bool]) -> f64 {
    Confusion::from_pairs(pred, actual).f1_percent()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    NonZeroActual,
}

/// Root mean squared error over the subset; `None` if the subset is empty.
pub fn rmse(pred: &[f64], actual: &[f64], subset: Subset) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        if subset == Subset::NonZeroActual && !is_nonzero_load(*a) {
            continue;
        }
        sum += (p - a) * (p - a);
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// `100 * mean(|pred - actual| / |actual|)` over non-zero actuals; `None` if there are none.
pub fn mape_nonzero(pred: &[f64], actual: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        if is_nonzero_load(*a) {
            sum += (p - a).abs() / a.abs();
            n += 1;
        }
    }
    (n > 0).then(|| 100.0 * sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Overall,
    HeatOnly,
    CoolOnly,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Overall, Scope::HeatOnly, Scope::CoolOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Overall => "overall",
            Scope::HeatOnly => "heat_only",
            Scope::CoolOnly => "cool_only",
        }
    }

    fn channels(self) -> &'static [usize] {
        match self {
            Scope::Overall => &[0, 1],
            Scope::HeatOnly => &[0],
            Scope::CoolOnly => &[1],
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub scope: Scope,
    pub f1_percent: f64,
    pub rmse_nonzero_kwh: Option<f64>,
    pub rmse_total_kwh: Option<f64>,
    pub mape_nonzero_percent: Option<f64>,
    pub counts: Confusion,
    pub n_points: usize,
    pub n_nonzero: usize,
}

/// Scoped reports over the pooled (step, channel) pairs of `series`.
pub fn report_scopes(model: &str, series: &PredictionSeries) -> Vec<EvalReport> {
    let c = series.actual_kwh.cols;
    Scope::ALL
        .iter()
        .map(|&scope| {
            let (mut pred, mut actual, mut pt, mut at) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for r in 0..series.actual_kwh.rows {
                for &ch in scope.channels().iter().filter(|ch| **ch < c) {
                    let a = series.actual_kwh.get(r, ch);
                    pred.push(series.predicted_kwh.get(r, ch));
                    actual.push(a);
                    pt.push(series.triggered[r * c + ch]);
                    at.push(is_nonzero_load(a));
                }
            }
            let counts = Confusion::from_pairs(&pt, &at);
            EvalReport {
                model: model.to_string(),
                scope,
                f1_percent: counts.f1_percent(),
                rmse_nonzero_kwh: rmse(&pred, &actual, Subset::NonZeroActual),
                rmse_total_kwh: rmse(&pred, &actual, Subset::All),
                mape_nonzero_percent: mape_nonzero(&pred, &actual),
                counts,
                n_points: actual.len(),
                n_nonzero: at.iter().filter(|x| **x).count(),
            }
        })
        .collect()
}

/// Runs `model` over `windows` and stacks the assembled predictions with the raw actual loads.
pub fn predict_split(
    model: &Model,
    stats: &NormalizationStats,
    windows: &[SampleWindow],
    threshold: f64,
) -> Result<PredictionSeries> {
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    let outs = predict_windows(model, &refs, 32)?;
    let c = model.cfg.n_channels;
    let rows: usize = windows.iter().map(|w| w.raw_loads.rows).sum();
    let mut series = PredictionSeries {
        trigger_prob: Mat::zeros(rows, c),
        predicted_kwh: Mat::zeros(rows, c),
        triggered: Vec::with_capacity(rows * c),
        actual_kwh: Mat::zeros(rows, c),
    };
    let mut r0 = 0;
    for out in &outs {
        let part = assemble_prediction(out, &model.cfg.quantiles, stats, threshold)?;
        let n = part.trigger_prob.len();
        series.trigger_prob.data[r0 * c..r0 * c + n].copy_from_slice(&part.trigger_prob.data);
        series.predicted_kwh.data[r0 * c..r0 * c + n].copy_from_slice(&part.predicted_kwh.data);
        series.triggered.extend(part.triggered);
        r0 += part.trigger_prob.rows;
    }
    for (i, w) in windows.iter().enumerate() {
        let n = w.raw_loads.len();
        let start = i * n;
        series.actual_kwh.data[start..start + n].copy_from_slice(&w.raw_loads.data);
    }
    Ok(series)
}

/// Evaluates a model whose training statistics are `model_stats` on windows
/// normalized with `data_stats`, refusing if the two disagree.
pub fn evaluate(
    model_name: &str,
    model: &Model,
    model_stats: &NormalizationStats,
    data_stats: &NormalizationStats,
    windows: &[SampleWindow],
    threshold: f64,
) -> Result<Vec<EvalReport>> {
    model_stats.matches(data_stats, 1e-9)?;
    let series = predict_split(model, model_stats, windows, threshold)?;
    Ok(report_scopes(model_name, &series))
}

/// Full-year predictions for one building: non-overlapping day windows cover every hour once.
pub fn predict_year(
    model: &Model,
    stats: &NormalizationStats,
    building: &BuildingStatic,
    weather: &WeatherSeries,
    threshold: f64,
) -> Result<PredictionSeries> {
    building.validate(0)?;
    weather.validate()?;
    let t = model.cfg.seq_len;
    if HOURS_PER_YEAR % t != 0 {
        return Err(Error::Config(format!("seq_len {t} does not tile a year")));
    }
    let static_x = stats.normalize_static(&building.covariates());
    let n = HOURS_PER_YEAR / t;
    let mut weather_x = Mat::zeros(HOURS_PER_YEAR, model.cfg.n_temporal);
    for (h, r) in weather.records.iter().enumerate() {
        weather_x.row_mut(h).copy_from_slice(&stats.normalize_temporal(&r.covariates()));
    }
    let mut outs = Vec::new();
    let chunk = 32;
    for start in (0..n).step_by(chunk) {
        let b = chunk.min(n - start);
        let mut sx = Mat::zeros(b, static_x.len());
        for i in 0..b {
            sx.row_mut(i).copy_from_slice(&static_x);
        }
        let rows = start * t..(start + b) * t;
        let wx = Mat::from_vec(
            b * t,
            weather_x.cols,
            weather_x.data[rows.start * weather_x.cols..rows.end * weather_x.cols].to_vec(),
        );
        let out = model.predict(&Batch { static_x: sx, weather: wx })?;
        outs.push(assemble_prediction(&out, &model.cfg.quantiles, stats, threshold)?);
    }
    let c = model.cfg.n_channels;
    let mut series = PredictionSeries {
        trigger_prob: Mat::zeros(HOURS_PER_YEAR, c),
        predicted_kwh: Mat::zeros(HOURS_PER_YEAR, c),
        triggered: Vec::with_capacity(HOURS_PER_YEAR * c),
        actual_kwh: Mat::zeros(HOURS_PER_YEAR, c),
    };
    let mut off = 0;
    for p in outs {
        let n = p.trigger_prob.len();
        series.trigger_prob.data[off..off + n].copy_from_slice(&p.trigger_prob.data);
        series.predicted_kwh.data[off..off + n].copy_from_slice(&p.predicted_kwh.data);
        series.triggered.extend(p.triggered);
        off += n;
    }
    Ok(series)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_report_csv<W: std::io::Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Schema(format!("writing report: {e}"));
    w.write_record(REPORT_CSV_HEADER).map_err(err)?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.scope.to_string(),
            r.f1_percent.to_string(),
            opt_cell(r.rmse_nonzero_kwh),
            opt_cell(r.rmse_total_kwh),
            opt_cell(r.mape_nonzero_percent),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Schema(format!("writing report: {e}")))
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_reports(reports: &[EvalReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_vec_pretty(reports)?;
    crate::dataio::write_atomic(&dir.join("report.json"), &json)?;
    let mut buf = Vec::new();
    write_report_csv(reports, &mut buf)?;
    crate::dataio::write_atomic(&dir.join("report.csv"), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::tests::toy_stats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f1_fixtures() {
        assert_eq!(f1_score(&[true, false, true], &[true, false, true]), 100.0);
        assert_eq!(f1_score(&[true, true, false, false], &[true, false, true, false]), 50.0);
        assert_eq!(f1_score(&[false; 4], &[false; 4]), 100.0);
        assert_eq!(f1_score(&[true], &[false]), 0.0);
    }

    #[test]
    fn rmse_and_mape_fixtures() {
        assert_eq!(rmse(&[1.0, -2.0], &[1.0, -2.0], Subset::All), Some(0.0));
        let r = rmse(&[0.0, 3.0], &[0.0, 0.0], Subset::All).unwrap();
        assert!((r - (4.5f64).sqrt()).abs() < 1e-15);
        assert!((r - 2.12132).abs() < 1e-5);
        assert_eq!(rmse(&[0.0, 3.0], &[0.0, 0.0], Subset::NonZeroActual), None);
        assert_eq!(mape_nonzero(&[5.0], &[5.0]), Some(0.0));
        assert!((mape_nonzero(&[8.0], &[10.0]).unwrap() - 20.0).abs() < 1e-12);
        assert!((mape_nonzero(&[8.0, 11.0], &[10.0, 10.0]).unwrap() - 15.0).abs() < 1e-12);
        assert!((mape_nonzero(&[-8.0], &[-10.0]).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(mape_nonzero(&[1.0], &[0.0]), None);
    }

    fn output(probs: &[f64], medians: &[f64]) -> ModelOutput {
        let rows = probs.len() / 2;
        let mut q = Mat::zeros(rows, 6);
        for r in 0..rows {
            for c in 0..2 {
                q.set(r, c * 3, -7.0);
                q.set(r, c * 3 + 1, medians[r * 2 + c]);
                q.set(r, c * 3 + 2, 7.0);
            }
        }
        ModelOutput {
            trigger_probs: Mat::from_vec(rows, 2, probs.to_vec()),
            quantile_proj: q,
            attention: None,
            static_weights: None,
            temporal_weights: None,
        }
    }

    #[test]
    fn assembly_rule() {
        let stats = toy_stats();
        let q = [0.1, 0.5, 0.9];
        let z = (42.0 - 0.25) / 1.5;
        let out = output(&[0.9, 0.4, 0.5, 0.51], &[z, z, z, z]);
        let p = assemble_prediction(&out, &q, &stats, 0.5).unwrap();
        assert!((p.predicted_kwh.get(0, 0) - 42.0).abs() < 1e-12);
        assert_eq!(p.predicted_kwh.get(0, 1), 0.0);
        assert_eq!(p.predicted_kwh.get(1, 0), 0.0);
        assert!(p.predicted_kwh.get(1, 1) != 0.0);
        assert_eq!(p.triggered, vec![true, false, false, true]);
        let none = assemble_prediction(&out, &q, &stats, 1.0).unwrap();
        assert!(none.predicted_kwh.data.iter().all(|v| *v == 0.0));
        assert!(matches!(assemble_prediction(&out, &[0.1, 0.4, 0.9], &stats, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_predictor_scores_perfectly() {
        let actual = Mat::from_vec(3, 2, vec![4.0, 0.0, 0.0, -2.0, 1.5, -0.5]);
        let series = PredictionSeries {
            trigger_prob: actual.map(|v| if v != 0.0 { 0.9 } else { 0.1 }),
            predicted_kwh: actual.clone(),
            triggered: actual.data.iter().map(|v| *v != 0.0).collect(),
            actual_kwh: actual,
        };
        for r in report_scopes("oracle", &series) {
            assert_eq!(r.f1_percent, 100.0);
            assert_eq!(r.rmse_total_kwh, Some(0.0));
            assert_eq!(r.rmse_nonzero_kwh, Some(0.0));
            assert_eq!(r.mape_nonzero_percent, Some(0.0));
        }
    }

    #[test]
    fn total_rmse_not_above_nonzero_when_zeros_are_exact() {
        let actual = Mat::from_vec(3, 2, vec![4.0, 0.0, 0.0, -2.0, 1.5, -0.5]);
        let mut pred = actual.clone();
        pred.data[0] = 5.0;
        pred.data[3] = -1.0;
        let series = PredictionSeries {
            trigger_prob: actual.map(|v| if v != 0.0 { 0.9 } else { 0.1 }),
            triggered: actual.data.iter().map(|v| *v != 0.0).collect(),
            predicted_kwh: pred,
            actual_kwh: actual,
        };
        let r = &report_scopes("m", &series)[0];
        assert!(r.rmse_total_kwh.unwrap() <= r.rmse_nonzero_kwh.unwrap());
    }

    fn brute_f1(pred: &[bool], actual: &[bool]) -> f64 {
        let tp = pred.iter().zip(actual).filter(|(p, a)| **p && **a).count() as f64;
        let pp = pred.iter().filter(|p| **p).count() as f64;
        let ap = actual.iter().filter(|a| **a).count() as f64;
        if pp + ap == 0.0 {
            return 100.0;
        }
        // F1 as the harmonic mean of precision and recall.
        if tp == 0.0 {
            return 0.0;
        }
        let precision = tp / pp;
        let recall = tp / ap;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }

    #[test]
    fn metrics_match_brute_force_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.gen_range(1..30);
            let actual: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(-50.0..50.0) })
                .collect();
            let pred: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(-50.0..50.0) })
                .collect();
            let pt: Vec<bool> = pred.iter().map(|v| *v != 0.0).collect();
            let at: Vec<bool> = actual.iter().map(|v| v.abs() > 1e-6).collect();
            assert!((f1_score(&pt, &at) - brute_f1(&pt, &at)).abs() < 1e-9);

            let sq: Vec<f64> = pred.iter().zip(&actual).map(|(p, a)| (p - a).powi(2)).collect();
            let total = (sq.iter().sum::<f64>() / n as f64).sqrt();
            assert!((rmse(&pred, &actual, Subset::All).unwrap() - total).abs() < 1e-9);
            let nz: Vec<usize> = (0..n).filter(|i| at[*i]).collect();
            let nz_rmse = (!nz.is_empty()).then(|| (nz.iter().map(|i| sq[*i]).sum::<f64>() / nz.len() as f64).sqrt());
            let nz_mape = (!nz.is_empty()).then(|| {
                100.0 * nz.iter().map(|i| ((pred[*i] - actual[*i]) / actual[*i]).abs()).sum::<f64>() / nz.len() as f64
            });
            match (rmse(&pred, &actual, Subset::NonZeroActual), nz_rmse) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
            match (mape_nonzero(&pred, &actual), nz_mape) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn scopes_recombine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rows = rng.gen_range(1..20);
            let actual = Mat::from_vec(rows, 2, (0..rows * 2).map(|_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-9.0..9.0) }).collect());
            let series = PredictionSeries {
                trigger_prob: Mat::zeros(rows, 2),
                predicted_kwh: actual.map(|v| v * 0.9),
                triggered: (0..rows * 2).map(|_| rng.gen_bool(0.5)).collect(),
                actual_kwh: actual,
            };
            let r = report_scopes("m", &series);
            assert_eq!(r[0].counts, r[1].counts.add(&r[2].counts));
            assert_eq!(r[0].n_points, r[1].n_points + r[2].n_points);
        }
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            model: "tft".into(),
            scope: Scope::HeatOnly,
            f1_percent: 97.5,
            rmse_nonzero_kwh: None,
            rmse_total_kwh: Some(1.25),
            mape_nonzero_percent: None,
            counts: Confusion::default(),
            n_points: 0,
            n_nonzero: 0,
        };
        let mut buf = Vec::new();
        write_report_csv(&[r], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "model,scope,f1_percent,rmse_nonzero_kwh,rmse_total_kwh,mape_nonzero_percent\ntft,heat_only,97.5,,1.25,\n"
        );
    }
}
