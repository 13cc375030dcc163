//! Building and weather inputs, normalization statistics, windowing and splits.
//!
//! On-disk dataset layout (see [`dataset`]):
//!
//! ```text
//! <dir>/manifest.json             {"<climate_id>": "train" | "val" | "test"}
//! <dir>/buildings.csv
//! <dir>/weather/<climate_id>.csv
//! <dir>/loads/<climate_id>/<building_id>.csv
//! ```

pub mod building;
pub mod dataset;
pub mod loads;
pub mod norm;
pub mod split;
pub mod weather;
pub mod window;

pub use building::{parse_building_csv, parse_buildings_str, write_building_csv, BuildingStatic};
pub use dataset::{Dataset, PairRange, SplitWindows};
pub(crate) use dataset::write_atomic;
pub use loads::{parse_loads_csv, parse_loads_str, write_loads_csv, LoadSeries};
pub use norm::{compute_norm_stats, NormalizationStats, VarStat};
pub use split::{assign_splits, DatasetSplit, SplitManifest, SplitTag};
pub use weather::{
    hour_of_year, parse_weather_csv, parse_weather_str, write_weather_csv, WeatherRecord,
    WeatherSeries,
};
pub use window::{make_windows, SampleWindow};

/// Hours in the 365-day year every series covers.
pub const HOURS_PER_YEAR: usize = 8760;
/// Window length in hourly steps.
pub const SEQ_LEN: usize = 24;
/// Loads with magnitude at or below this many kWh count as "no demand".
pub const EPS_ZERO: f64 = 1e-6;
pub const N_STATIC: usize = 13;
pub const N_TEMPORAL: usize = 13;
/// Channel 0 is heating (non-negative), channel 1 is cooling (non-positive).
pub const N_CHANNELS: usize = 2;
pub const DEFAULT_STRIDE: usize = 24;

pub const STATIC_COLUMNS: [&str; N_STATIC] = [
    "height",
    "perimeter",
    "glazing_ratio",
    "footprint",
    "heat_setpoint",
    "cool_setpoint",
    "wall_u",
    "roof_u",
    "floor_u",
    "window_u",
    "wall_refl_avg",
    "wall_refl",
    "roof_refl",
];

pub const TEMPORAL_COLUMNS: [&str; N_TEMPORAL] = [
    "day",
    "month",
    "hour",
    "diffuse_rad",
    "beam_rad",
    "temp",
    "surface_temp",
    "wind_speed",
    "wind_dir",
    "rel_humidity",
    "precip",
    "cloud_cover",
    "hour_of_year",
];

pub const LOAD_COLUMNS: [&str; N_CHANNELS] = ["heat_kwh", "cool_kwh"];

/// Whether a raw load in kWh counts as a triggered heating/cooling demand.
#[inline]
pub fn is_nonzero_load(kwh: f64) -> bool {
    kwh.abs() > EPS_ZERO
}

pub(crate) fn parse_cell(
    record: &csv::StringRecord,
    idx: usize,
    row: usize,
    column: &str,
) -> crate::Result<f64> {
    let raw = record.get(idx).ok_or_else(|| crate::Error::Parse {
        row,
        column: column.to_string(),
        message: "missing cell".into(),
    })?;
    let v: f64 = raw.trim().parse().map_err(|_| crate::Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(crate::Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

/// Compares a CSV header against the expected column list and names the first offending column.
pub(crate) fn check_header(found: &[&str], expected: &[&str]) -> crate::Result<()> {
    for f in found {
        if !expected.contains(f) {
            return Err(crate::Error::Schema(format!("unexpected column `{f}`")));
        }
    }
    for e in expected {
        if !found.contains(e) {
            return Err(crate::Error::Schema(format!("missing column `{e}`")));
        }
    }
    for (i, (f, e)) in found.iter().zip(expected).enumerate() {
        if f != e {
            return Err(crate::Error::Schema(format!(
                "column `{f}` at position {i}, expected `{e}`"
            )));
        }
    }
    if found.len() != expected.len() {
        return Err(crate::Error::Schema("duplicate column in header".into()));
    }
    Ok(())
}

pub(crate) fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

pub(crate) fn csv_error(e: csv::Error, row: usize) -> crate::Error {
    crate::Error::Parse {
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

pub(crate) fn header_of<R: std::io::Read>(rdr: &mut csv::Reader<R>) -> crate::Result<Vec<String>> {
    let h = rdr
        .headers()
        .map_err(|e| crate::Error::Schema(format!("unreadable header: {e}")))?;
    Ok(h.iter().map(str::to_string).collect())
}

pub(crate) fn check_width(record: &csv::StringRecord, width: usize, row: usize) -> crate::Result<()> {
    if record.len() != width {
        return Err(crate::Error::Parse {
            row,
            column: String::new(),
            message: format!("expected {width} cells, found {}", record.len()),
        });
    }
    Ok(())
}

/// Formats a float so that parsing it back gives the identical bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}
