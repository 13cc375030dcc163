use serde::{Deserialize, Serialize};

use super::{
    is_nonzero_load, BuildingStatic, LoadSeries, NormalizationStats, WeatherSeries,
    HOURS_PER_YEAR, N_CHANNELS, N_STATIC, N_TEMPORAL, SEQ_LEN,
};
use crate::tensor::Mat;
use crate::{Error, Result};

/// One training sample: a building, 24 consecutive hours of weather and the matching loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    pub climate_id: String,
    pub building_id: String,
    /// Index of the first hour (0-based).
    pub start: usize,
    /// Normalized static covariates, length 13.
    pub static_covariates: Vec<f64>,
    /// Normalized weather, `SEQ_LEN x 13`.
    pub weather: Mat,
    /// Normalized signed loads, `SEQ_LEN x 2`.
    pub target_loads: Mat,
    /// 1.0 where the raw load is non-zero, else 0.0; `SEQ_LEN x 2`.
    pub trigger_targets: Mat,
    /// Signed loads in kWh, `SEQ_LEN x 2`.
    pub raw_loads: Mat,
}

impl SampleWindow {
    pub fn len(&self) -> usize {
        self.weather.rows
    }

    pub fn is_empty(&self) -> bool {
        self.weather.rows == 0
    }
}

/// Number of windows of length [`SEQ_LEN`] with the given stride over a full year.
pub fn window_count(stride: usize) -> usize {
    (HOURS_PER_YEAR - SEQ_LEN) / stride + 1
}

/// Cuts aligned weather and load series into windows starting at `0, stride, 2*stride, ...`.
pub fn make_windows(
    building: &BuildingStatic,
    weather: &WeatherSeries,
    loads: &LoadSeries,
    stats: &NormalizationStats,
    stride: usize,
) -> Result<Vec<SampleWindow>> {
    if stride == 0 {
        return Err(Error::Argument("window stride must be positive".into()));
    }
    if weather.records.len() != HOURS_PER_YEAR {
        return Err(Error::Length {
            expected: HOURS_PER_YEAR,
            found: weather.records.len(),
        });
    }
    loads.validate()?;
    if loads.climate_id != weather.climate_id || loads.building_id != building.building_id {
        return Err(Error::Invariant(format!(
            "loads for ({}, {}) paired with ({}, {})",
            loads.climate_id, loads.building_id, weather.climate_id, building.building_id
        )));
    }

    let static_covariates = stats.normalize_static(&building.covariates()).to_vec();
    let norm_weather: Vec<[f64; N_TEMPORAL]> = weather
        .records
        .iter()
        .map(|r| stats.normalize_temporal(&r.covariates()))
        .collect();

    let mut out = Vec::with_capacity(window_count(stride));
    let mut start = 0;
    while start + SEQ_LEN <= HOURS_PER_YEAR {
        let mut w = Mat::zeros(SEQ_LEN, N_TEMPORAL);
        let mut target = Mat::zeros(SEQ_LEN, N_CHANNELS);
        let mut trig = Mat::zeros(SEQ_LEN, N_CHANNELS);
        let mut raw = Mat::zeros(SEQ_LEN, N_CHANNELS);
        for t in 0..SEQ_LEN {
            let h = start + t;
            w.row_mut(t).copy_from_slice(&norm_weather[h]);
            for (c, kwh) in loads.at(h).into_iter().enumerate() {
                raw.set(t, c, kwh);
                target.set(t, c, stats.normalize_load(kwh, c));
                trig.set(t, c, if is_nonzero_load(kwh) { 1.0 } else { 0.0 });
            }
        }
        out.push(SampleWindow {
            climate_id: weather.climate_id.clone(),
            building_id: building.building_id.clone(),
            start,
            static_covariates: static_covariates.clone(),
            weather: w,
            target_loads: target,
            trigger_targets: trig,
            raw_loads: raw,
        });
        start += stride;
    }
    debug_assert_eq!(out.len(), window_count(stride));
    debug_assert_eq!(static_covariates.len(), N_STATIC);
    Ok(out)
}
