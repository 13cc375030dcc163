//! Per-variable z-score statistics computed from the train split.

use serde::{Deserialize, Serialize};

use super::{
    BuildingStatic, LoadSeries, SplitTag, WeatherSeries, LOAD_COLUMNS, N_CHANNELS, N_STATIC,
    N_TEMPORAL, STATIC_COLUMNS, TEMPORAL_COLUMNS,
};
use crate::{Error, Result};

/// Standard deviations below this are treated as a constant column.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Mean and standard deviation for every static, temporal and load variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub static_vars: Vec<VarStat>,
    pub temporal_vars: Vec<VarStat>,
    pub load_vars: Vec<VarStat>,
}

impl NormalizationStats {
    pub fn lookup(&self, var: &str) -> Result<&VarStat> {
        self.static_vars
            .iter()
            .chain(&self.temporal_vars)
            .chain(&self.load_vars)
            .find(|s| s.name == var)
            .ok_or_else(|| Error::UnknownVariable(var.to_string()))
    }

    pub fn normalize(&self, x: f64, var: &str) -> Result<f64> {
        let s = self.lookup(var)?;
        Ok((x - s.mean) / s.std)
    }

    pub fn denormalize(&self, z: f64, var: &str) -> Result<f64> {
        let s = self.lookup(var)?;
        Ok(z * s.std + s.mean)
    }

    pub fn normalize_static(&self, raw: &[f64; N_STATIC]) -> [f64; N_STATIC] {
        std::array::from_fn(|i| (raw[i] - self.static_vars[i].mean) / self.static_vars[i].std)
    }

    pub fn normalize_temporal(&self, raw: &[f64; N_TEMPORAL]) -> [f64; N_TEMPORAL] {
        std::array::from_fn(|i| (raw[i] - self.temporal_vars[i].mean) / self.temporal_vars[i].std)
    }

    pub fn normalize_load(&self, kwh: f64, channel: usize) -> f64 {
        (kwh - self.load_vars[channel].mean) / self.load_vars[channel].std
    }

    pub fn denormalize_load(&self, z: f64, channel: usize) -> f64 {
        z * self.load_vars[channel].std + self.load_vars[channel].mean
    }

    /// Structural check used when loading stats from untrusted sources.
    pub fn validate(&self) -> Result<()> {
        let groups: [(&[VarStat], &[&str]); 3] = [
            (&self.static_vars, &STATIC_COLUMNS),
            (&self.temporal_vars, &TEMPORAL_COLUMNS),
            (&self.load_vars, &LOAD_COLUMNS),
        ];
        for (stats, names) in groups {
            if stats.len() != names.len() {
                return Err(Error::Invariant(format!(
                    "expected {} statistics, found {}",
                    names.len(),
                    stats.len()
                )));
            }
            for (s, n) in stats.iter().zip(names) {
                if s.name != *n {
                    return Err(Error::Invariant(format!("statistic `{}` where `{n}` expected", s.name)));
                }
                if !s.mean.is_finite() || !s.std.is_finite() || s.std <= 0.0 {
                    return Err(Error::Invariant(format!("statistic `{n}` is degenerate")));
                }
            }
        }
        Ok(())
    }

    /// Whether two stat sets agree to within `rel_tol` in every mean and std.
    pub fn matches(&self, other: &NormalizationStats, rel_tol: f64) -> Result<()> {
        let a = self.static_vars.iter().chain(&self.temporal_vars).chain(&self.load_vars);
        let b = other.static_vars.iter().chain(&other.temporal_vars).chain(&other.load_vars);
        let close = |x: f64, y: f64| (x - y).abs() <= rel_tol * x.abs().max(y.abs()).max(1.0);
        let mut n = 0;
        for (x, y) in a.zip(b) {
            n += 1;
            if x.name != y.name || !close(x.mean, y.mean) || !close(x.std, y.std) {
                return Err(Error::StatsMismatch(format!(
                    "`{}`: mean {} / std {} vs `{}`: mean {} / std {}",
                    x.name, x.mean, x.std, y.name, y.mean, y.std
                )));
            }
        }
        if n != N_STATIC + N_TEMPORAL + N_CHANNELS {
            return Err(Error::StatsMismatch("variable sets differ".into()));
        }
        Ok(())
    }
}

/// Population mean and standard deviation; constant columns get std 1.
fn column_stat(name: &str, values: impl Iterator<Item = f64> + Clone) -> VarStat {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    let mut std = if n == 0 { 0.0 } else { (ss / n as f64).sqrt() };
    if std < MIN_STD {
        log::warn!("variable `{name}` is constant (mean {mean}); clamping std to 1");
        std = 1.0;
    }
    VarStat {
        name: name.to_string(),
        mean,
        std,
    }
}

/// Computes z-score statistics from train-split data only.
///
/// Every weather series must be untagged or tagged `train`, and every load
/// series must belong to one of the given climates.
pub fn compute_norm_stats(
    weather: &[&WeatherSeries],
    buildings: &[BuildingStatic],
    loads: &[&LoadSeries],
) -> Result<NormalizationStats> {
    if weather.is_empty() {
        return Err(Error::Argument(
            "normalization needs at least one train climate".into(),
        ));
    }
    if buildings.is_empty() {
        return Err(Error::Argument("normalization needs at least one building".into()));
    }
    for w in weather {
        if matches!(w.split_tag, Some(SplitTag::Val) | Some(SplitTag::Test)) {
            return Err(Error::Invariant(format!(
                "climate `{}` is not in the train split",
                w.climate_id
            )));
        }
    }
    for l in loads {
        if !weather.iter().any(|w| w.climate_id == l.climate_id) {
            return Err(Error::Invariant(format!(
                "load series for climate `{}` is outside the train split",
                l.climate_id
            )));
        }
    }

    let static_vars = (0..N_STATIC)
        .map(|i| column_stat(STATIC_COLUMNS[i], buildings.iter().map(move |b| b.covariates()[i])))
        .collect();
    let temporal_vars = (0..N_TEMPORAL)
        .map(|i| {
            column_stat(
                TEMPORAL_COLUMNS[i],
                weather
                    .iter()
                    .flat_map(|w| w.records.iter())
                    .map(move |r| r.covariates()[i]),
            )
        })
        .collect();
    let load_vars = vec![
        column_stat(LOAD_COLUMNS[0], loads.iter().flat_map(|l| l.heat.iter().copied())),
        column_stat(LOAD_COLUMNS[1], loads.iter().flat_map(|l| l.cool.iter().copied())),
    ];
    Ok(NormalizationStats {
        static_vars,
        temporal_vars,
        load_vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::building::tests::sample_building;
    use crate::dataio::weather::tests::flat_series;
    use proptest::prelude::*;

    #[test]
    fn two_point_population_std() {
        let s = column_stat("x", [0.0, 2.0].into_iter());
        assert_eq!((s.mean, s.std), (1.0, 1.0));
    }

    #[test]
    fn constant_column_clamps_std_to_one() {
        let s = column_stat("x", std::iter::repeat(7.5).take(10));
        assert_eq!((s.mean, s.std), (7.5, 1.0));
        let stats = NormalizationStats {
            static_vars: vec![],
            temporal_vars: vec![s],
            load_vars: vec![],
        };
        assert_eq!(stats.normalize(7.5, "x").unwrap(), 0.0);
    }

    fn stats_fixture() -> NormalizationStats {
        let w = flat_series("c", 10.0);
        let mut b2 = sample_building("b2");
        b2.height = 30.0;
        let loads = LoadSeries {
            building_id: "b1".into(),
            climate_id: "c".into(),
            heat: (0..8760).map(|i| (i % 3) as f64).collect(),
            cool: vec![0.0; 8760],
        };
        compute_norm_stats(&[&w], &[sample_building("b1"), b2], &[&loads]).unwrap()
    }

    #[test]
    fn z_score_identities() {
        let stats = stats_fixture();
        let h = stats.lookup("height").unwrap().clone();
        assert_eq!(stats.normalize(h.mean, "height").unwrap(), 0.0);
        assert!((stats.normalize(h.mean + h.std, "height").unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            stats.normalize(1.0, "albedo"),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn refuses_non_train_climates() {
        let mut w = flat_series("c", 10.0);
        w.split_tag = Some(SplitTag::Test);
        let err = compute_norm_stats(&[&w], &[sample_building("b")], &[]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));

        let train = flat_series("a", 10.0);
        let stray = LoadSeries {
            building_id: "b".into(),
            climate_id: "elsewhere".into(),
            heat: vec![0.0; 8760],
            cool: vec![0.0; 8760],
        };
        assert!(compute_norm_stats(&[&train], &[sample_building("b")], &[&stray]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_round_trip(x in -1e6f64..1e6, var in 0usize..28) {
            let stats = stats_fixture();
            let names: Vec<&str> = STATIC_COLUMNS.iter().chain(&TEMPORAL_COLUMNS).chain(&LOAD_COLUMNS).copied().collect();
            let name = names[var];
            let back = stats.denormalize(stats.normalize(x, name).unwrap(), name).unwrap();
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
