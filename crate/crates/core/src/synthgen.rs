//! Synthetic weather years and a closed-form load oracle.
//!
//! The oracle is a steady-state conductance model with no thermal mass:
//!
//! ```text
//! wall_area = perimeter * height
//! UA_eff    = ( wall_area * ((1 - glazing) * wall_u + glazing * window_u)
//!             + footprint * (roof_u + floor_u) ) / 1000            [kW/K]
//! T_eff[t]  = T_out[t] + solar_gain * glazing * (beam[t] + diffuse[t])
//! heat[t]   =  k_heat * UA_eff * max(0, heat_setpoint - T_out[t])
//! cool[t]   = -k_cool * UA_eff * max(0, T_eff[t] - cool_setpoint)
//! ```
//!
//! Heating reacts to outdoor air only while cooling also sees solar gain, so a
//! cold sunny hour can demand both.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::dataset::write_atomic;
use crate::dataio::weather::calendar_of;
use crate::dataio::{
    BuildingStatic, Dataset, LoadSeries, SplitManifest, SplitTag, WeatherRecord, WeatherSeries,
    HOURS_PER_YEAR,
};
use crate::{Error, Result};

pub const SYNTH_CONFIG_FILE: &str = "synth-config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClimateConfig {
    pub climate_id: String,
    /// Annual mean air temperature, °C.
    pub mean_temp: f64,
    /// Half the winter-to-summer swing, °C.
    pub seasonal_amplitude: f64,
    /// Half the night-to-afternoon swing, °C.
    pub diurnal_amplitude: f64,
    /// Clear-sky midday global radiation at the summer solstice, W/m².
    pub solar_peak: f64,
    /// Baseline relative humidity, %.
    pub humidity_base: f64,
    /// Stationary standard deviation of the AR(1) temperature noise, °C.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthClimateConfig {
    pub fn temperate(climate_id: &str, seed: u64) -> Self {
        SynthClimateConfig {
            climate_id: climate_id.into(),
            mean_temp: 16.0,
            seasonal_amplitude: 8.0,
            diurnal_amplitude: 6.0,
            solar_peak: 850.0,
            humidity_base: 70.0,
            noise_std: 1.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("climate `{}`: {m}", self.climate_id)));
        if self.climate_id.is_empty() || self.climate_id.contains(['/', '\\']) {
            return bad("climate_id must be a plain non-empty name");
        }
        let vals = [
            self.mean_temp,
            self.seasonal_amplitude,
            self.diurnal_amplitude,
            self.solar_peak,
            self.humidity_base,
            self.noise_std,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return bad("all parameters must be finite");
        }
        if self.seasonal_amplitude < 0.0 || self.diurnal_amplitude < 0.0 {
            return bad("amplitudes must be >= 0");
        }
        if self.noise_std < 0.0 {
            return bad("noise_std must be >= 0");
        }
        if self.solar_peak < 0.0 {
            return bad("solar_peak must be >= 0");
        }
        if !(0.0..=100.0).contains(&self.humidity_base) {
            return bad("humidity_base must lie in [0, 100]");
        }
        Ok(())
    }
}

/// Constants of the load oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConstants {
    /// Dimensionless multiplier on the heating conductance law.
    pub k_heat: f64,
    /// Dimensionless multiplier on the cooling conductance law.
    pub k_cool: f64,
    /// °C of effective temperature rise per W/m² of global radiation at glazing ratio 1.
    pub solar_gain: f64,
}

impl Default for OracleConstants {
    fn default() -> Self {
        OracleConstants {
            k_heat: 1.0,
            k_cool: 1.0,
            solar_gain: 0.1,
        }
    }
}

/// Everything needed to regenerate a synthetic dataset; written next to it as `synth-config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub climates: Vec<SynthClimateConfig>,
    pub buildings: Vec<BuildingStatic>,
    pub manifest: SplitManifest,
    #[serde(default)]
    pub oracle: OracleConstants,
}

/// Four buildings of different size, envelope quality and setpoints.
pub fn default_buildings() -> Vec<BuildingStatic> {
    vec![
        BuildingStatic::from_covariates(
            "office_a",
            [18.0, 160.0, 0.45, 1500.0, 20.0, 23.0, 0.45, 0.25, 0.35, 2.2, 0.35, 0.30, 0.25],
        ),
        BuildingStatic::from_covariates(
            "lab_b",
            [24.0, 200.0, 0.30, 2400.0, 21.0, 24.0, 0.60, 0.30, 0.40, 2.8, 0.30, 0.25, 0.20],
        ),
        BuildingStatic::from_covariates(
            "dorm_c",
            [12.0, 120.0, 0.25, 850.0, 19.0, 22.5, 0.80, 0.45, 0.50, 3.0, 0.40, 0.40, 0.30],
        ),
        BuildingStatic::from_covariates(
            "library_d",
            [9.0, 180.0, 0.55, 1900.0, 20.5, 23.5, 0.35, 0.20, 0.30, 1.8, 0.45, 0.50, 0.35],
        ),
    ]
}

impl SynthConfig {
    /// Two climates (one train, one test) and four buildings.
    pub fn default_desk() -> Self {
        let climates = vec![
            SynthClimateConfig::temperate("temperate", 11),
            SynthClimateConfig {
                mean_temp: 16.5,
                seasonal_amplitude: 7.0,
                ..SynthClimateConfig::temperate("mild", 23)
            },
        ];
        let manifest = SplitManifest(
            [
                ("temperate".to_string(), SplitTag::Train),
                ("mild".to_string(), SplitTag::Test),
            ]
            .into_iter()
            .collect(),
        );
        SynthConfig {
            climates,
            buildings: default_buildings(),
            manifest,
            oracle: OracleConstants::default(),
        }
    }

    /// Two train climates bracketing one held-out test climate, four buildings.
    pub fn benchmark() -> Self {
        let climates = vec![
            SynthClimateConfig {
                mean_temp: 11.0,
                seasonal_amplitude: 9.0,
                diurnal_amplitude: 5.5,
                solar_peak: 800.0,
                humidity_base: 75.0,
                ..SynthClimateConfig::temperate("cool_coast", 101)
            },
            SynthClimateConfig {
                mean_temp: 20.0,
                seasonal_amplitude: 8.0,
                diurnal_amplitude: 6.5,
                solar_peak: 950.0,
                humidity_base: 55.0,
                ..SynthClimateConfig::temperate("warm_inland", 202)
            },
            SynthClimateConfig {
                mean_temp: 15.5,
                seasonal_amplitude: 8.0,
                diurnal_amplitude: 6.0,
                solar_peak: 880.0,
                humidity_base: 65.0,
                ..SynthClimateConfig::temperate("heldout_temperate", 303)
            },
        ];
        let manifest = SplitManifest(
            [
                ("cool_coast".to_string(), SplitTag::Train),
                ("warm_inland".to_string(), SplitTag::Train),
                ("heldout_temperate".to_string(), SplitTag::Test),
            ]
            .into_iter()
            .collect(),
        );
        SynthConfig {
            climates,
            buildings: default_buildings(),
            manifest,
            oracle: OracleConstants::default(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("synth config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.climates.is_empty() {
            return Err(Error::Config("at least one climate is required".into()));
        }
        for c in &self.climates {
            c.validate()?;
            if self.manifest.tag(&c.climate_id).is_none() {
                return Err(Error::Config(format!(
                    "climate `{}` missing from the split manifest",
                    c.climate_id
                )));
            }
        }
        let mut ids: Vec<&str> = self.climates.iter().map(|c| c.climate_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate climate_id".into()));
        }
        if !self
            .climates
            .iter()
            .any(|c| self.manifest.tag(&c.climate_id) == Some(SplitTag::Train))
        {
            return Err(Error::Config("at least one train climate is required".into()));
        }
        let mut bids: Vec<&str> = self.buildings.iter().map(|b| b.building_id.as_str()).collect();
        bids.sort_unstable();
        if bids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate building_id".into()));
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if b.building_id.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!("building_id `{}` is not a plain name", b.building_id)));
            }
            b.validate(i + 1).map_err(|e| Error::Config(e.to_string()))?;
        }
        let o = &self.oracle;
        if !(o.k_heat >= 0.0 && o.k_cool >= 0.0 && o.solar_gain >= 0.0)
            || ![o.k_heat, o.k_cool, o.solar_gain].iter().all(|v| v.is_finite())
        {
            return Err(Error::Config("oracle constants must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Generates one 8760-hour weather year, deterministic in `cfg`.
pub fn generate_weather(cfg: &SynthClimateConfig) -> Result<WeatherSeries> {
    use std::f64::consts::PI;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let precip_dist = Exp::new(0.5).expect("valid rate");
    let ar = 0.9_f64;
    let innov = (1.0 - ar * ar).sqrt() * cfg.noise_std;
    let mut noise = 0.0;
    let mut day_cloud = 0.5;
    let mut records = Vec::with_capacity(HOURS_PER_YEAR);

    for h in 1..=HOURS_PER_YEAR as u32 {
        let (month, day, hour) = calendar_of(h);
        let doy = ((h - 1) / 24) as f64;
        if hour == 0 {
            day_cloud = (0.6 * day_cloud + 0.4 * rng.gen::<f64>()).clamp(0.0, 1.0);
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        noise = ar * noise + innov * z;

        // -1 in mid January, +1 in mid July.
        let season = -(2.0 * PI * (doy + 0.5 - 15.0) / 365.0).cos();
        // Peaks at 15:00.
        let diurnal = -(2.0 * PI * (hour as f64 - 3.0) / 24.0).cos();
        let temperature = cfg.mean_temp
            + cfg.seasonal_amplitude * season
            + cfg.diurnal_amplitude * diurnal
            + noise;

        let cloud_jitter: f64 = StandardNormal.sample(&mut rng);
        let cloud_cover = (day_cloud + 0.08 * cloud_jitter).clamp(0.0, 1.0);

        let day_len = 12.0 + 3.0 * season;
        let sunrise = 12.0 - day_len / 2.0;
        let phase = (hour as f64 + 0.5 - sunrise) / day_len;
        let elevation = if (0.0..=1.0).contains(&phase) {
            (PI * phase).sin()
        } else {
            0.0
        };
        let clear_sky = cfg.solar_peak * elevation * (0.75 + 0.25 * season);
        let beam_radiation = (clear_sky * (1.0 - 0.8 * cloud_cover)).max(0.0);
        let diffuse_radiation = (clear_sky * (0.1 + 0.35 * cloud_cover)).max(0.0);

        let wind_z: f64 = StandardNormal.sample(&mut rng);
        let wind_speed = (3.5 + 1.5 * wind_z).max(0.0);
        let wind_direction = rng.gen_range(0.0..360.0);
        let rh_z: f64 = StandardNormal.sample(&mut rng);
        let relative_humidity = (cfg.humidity_base - 2.5 * cfg.diurnal_amplitude * diurnal
            + 15.0 * (cloud_cover - 0.5)
            + 3.0 * rh_z)
            .clamp(0.0, 100.0);
        let rain_draw: f64 = rng.gen();
        let precipitation = if cloud_cover > 0.75 && rain_draw < 0.3 {
            precip_dist.sample(&mut rng)
        } else {
            0.0
        };
        let surface_temperature = temperature + 0.012 * (beam_radiation + diffuse_radiation);

        records.push(WeatherRecord {
            day_of_month: day,
            month,
            hour,
            diffuse_radiation,
            beam_radiation,
            temperature,
            surface_temperature,
            wind_speed,
            wind_direction,
            relative_humidity,
            precipitation,
            cloud_cover,
            hour_of_year: h,
        });
    }
    let series = WeatherSeries {
        climate_id: cfg.climate_id.clone(),
        records,
        split_tag: None,
    };
    series.validate()?;
    Ok(series)
}

/// Effective envelope conductance in kW/K.
pub fn ua_eff(b: &BuildingStatic) -> f64 {
    let wall_area = b.perimeter * b.height;
    let g = b.wall_glazing_ratio;
    (wall_area * ((1.0 - g) * b.wall_u_value + g * b.window_u_value)
        + b.footprint_area * (b.roof_u_value + b.floor_u_value))
        / 1000.0
}

/// Outdoor temperature plus the glazing-weighted solar gain.
pub fn effective_temperature(b: &BuildingStatic, r: &WeatherRecord, oracle: &OracleConstants) -> f64 {
    r.temperature + oracle.solar_gain * b.wall_glazing_ratio * r.global_radiation()
}

/// Runs the load oracle for one building over one weather year.
pub fn simulate_loads(b: &BuildingStatic, w: &WeatherSeries, oracle: &OracleConstants) -> LoadSeries {
    let ua = ua_eff(b);
    let (heat, cool) = w
        .records
        .iter()
        .map(|r| {
            let t_eff = effective_temperature(b, r, oracle);
            let heat = oracle.k_heat * ua * (b.heating_setpoint - r.temperature).max(0.0);
            let cool = -oracle.k_cool * ua * (t_eff - b.cooling_setpoint).max(0.0);
            // Normalizes -0.0 so written files never carry a sign on zero.
            (heat, if cool == 0.0 { 0.0 } else { cool })
        })
        .unzip();
    LoadSeries {
        building_id: b.building_id.clone(),
        climate_id: w.climate_id.clone(),
        heat,
        cool,
    }
}

/// Generates all weather years and load series described by `cfg`.
pub fn build_synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let climates: Vec<WeatherSeries> = cfg
        .climates
        .par_iter()
        .map(generate_weather)
        .collect::<Result<_>>()?;
    let jobs: Vec<(&WeatherSeries, &BuildingStatic)> = climates
        .iter()
        .flat_map(|w| cfg.buildings.iter().map(move |b| (w, b)))
        .collect();
    let loads: Vec<LoadSeries> = jobs
        .par_iter()
        .map(|(w, b)| simulate_loads(b, w, &cfg.oracle))
        .collect();
    Dataset::new(cfg.buildings.clone(), climates, loads, cfg.manifest.clone())
}

/// Generates the dataset and writes it, plus `synth-config.json`, under `out_dir`.
pub fn write_synth_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Dataset> {
    let out_dir = out_dir.as_ref();
    let ds = build_synth_dataset(cfg)?;
    ds.write(out_dir)?;
    write_atomic(&out_dir.join(SYNTH_CONFIG_FILE), cfg.to_json_string().as_bytes())?;
    Ok(ds)
}

/// Fraction of hours with zero demand, per channel, pooled over the given series.
pub fn zero_fractions<'a>(loads: impl IntoIterator<Item = &'a LoadSeries>) -> [f64; 2] {
    let mut zeros = [0usize; 2];
    let mut n = 0usize;
    for l in loads {
        for t in 0..l.heat.len() {
            n += 1;
            for (c, v) in l.at(t).into_iter().enumerate() {
                if !crate::dataio::is_nonzero_load(v) {
                    zeros[c] += 1;
                }
            }
        }
    }
    [zeros[0] as f64 / n as f64, zeros[1] as f64 / n as f64]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::building::tests::sample_building;
    use crate::dataio::weather::tests::flat_series;

    #[test]
    fn degenerate_climate_is_constant_mean() {
        let cfg = SynthClimateConfig {
            seasonal_amplitude: 0.0,
            diurnal_amplitude: 0.0,
            noise_std: 0.0,
            ..SynthClimateConfig::temperate("flat", 5)
        };
        let w = generate_weather(&cfg).unwrap();
        assert!(w.records.iter().all(|r| r.temperature == cfg.mean_temp));
    }

    #[test]
    fn same_seed_same_series() {
        let cfg = SynthClimateConfig::temperate("t", 42);
        let a = generate_weather(&cfg).unwrap();
        let b = generate_weather(&cfg).unwrap();
        assert!(a
            .records
            .iter()
            .zip(&b.records)
            .all(|(x, y)| x.temperature.to_bits() == y.temperature.to_bits()
                && x.beam_radiation.to_bits() == y.beam_radiation.to_bits()));
        let c = generate_weather(&SynthClimateConfig::temperate("t", 43)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn calendar_columns_cycle() {
        let w = generate_weather(&SynthClimateConfig::temperate("t", 1)).unwrap();
        for (i, r) in w.records.iter().enumerate() {
            assert_eq!(r.hour as usize, i % 24);
            assert_eq!(r.hour_of_year as usize, i + 1);
        }
    }

    #[test]
    fn deadband_gives_zero_loads() {
        let b = sample_building("b");
        let w = flat_series("c", b.heating_setpoint);
        let l = simulate_loads(&b, &w, &OracleConstants::default());
        assert!(l.heat.iter().chain(&l.cool).all(|v| *v == 0.0));
    }

    #[test]
    fn linear_heating_law() {
        let mut b = sample_building("b");
        let ua = ua_eff(&b);
        let oracle = OracleConstants {
            k_heat: 2.0 / ua,
            ..OracleConstants::default()
        };
        b.heating_setpoint = 20.0;
        let w = flat_series("c", 10.0);
        let l = simulate_loads(&b, &w, &oracle);
        assert!(l.heat.iter().all(|v| (v - 20.0).abs() < 1e-12));
    }

    #[test]
    fn ua_closed_form() {
        let b = sample_building("b");
        // walls 120*12 = 1440 m²: 0.7*0.5 + 0.3*2.5 = 1.1 W/m²K; roof+floor 800*0.7.
        let expected = (1440.0 * 1.1 + 800.0 * 0.7) / 1000.0;
        assert!((ua_eff(&b) - expected).abs() < 1e-12);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = SynthConfig::benchmark();
        assert_eq!(SynthConfig::from_json_str(&cfg.to_json_string()).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.climates[0].noise_std = -1.0;
        assert!(SynthConfig::from_json_str(&bad.to_json_string()).is_err());
        let mut no_train = cfg;
        for v in no_train.manifest.0.values_mut() {
            *v = SplitTag::Test;
        }
        assert!(no_train.validate().is_err());
    }
}
