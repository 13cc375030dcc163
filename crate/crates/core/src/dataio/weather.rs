use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    check_header, check_width, csv_error, csv_reader, fmt_f64, header_of, parse_cell, SplitTag,
    HOURS_PER_YEAR, N_TEMPORAL, TEMPORAL_COLUMNS,
};
use crate::{Error, Result};

const DAYS_IN_MONTH: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// One hour of weather. `hour_of_year` runs 1..=8760 over a non-leap year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub day_of_month: u32,
    pub month: u32,
    pub hour: u32,
    pub diffuse_radiation: f64,
    pub beam_radiation: f64,
    pub temperature: f64,
    pub surface_temperature: f64,
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub relative_humidity: f64,
    pub precipitation: f64,
    pub cloud_cover: f64,
    pub hour_of_year: u32,
}

impl WeatherRecord {
    /// The temporal covariates in [`TEMPORAL_COLUMNS`] order.
    pub fn covariates(&self) -> [f64; N_TEMPORAL] {
        [
            self.day_of_month as f64,
            self.month as f64,
            self.hour as f64,
            self.diffuse_radiation,
            self.beam_radiation,
            self.temperature,
            self.surface_temperature,
            self.wind_speed,
            self.wind_direction,
            self.relative_humidity,
            self.precipitation,
            self.cloud_cover,
            self.hour_of_year as f64,
        ]
    }

    /// Global horizontal radiation, W/m².
    pub fn global_radiation(&self) -> f64 {
        self.beam_radiation + self.diffuse_radiation
    }

    pub fn validate(&self, row: usize) -> Result<()> {
        let range = |message: String| Err(Error::Range { row, message });
        if !(1..=12).contains(&self.month) {
            return range(format!("month {} outside 1..=12", self.month));
        }
        let dim = DAYS_IN_MONTH[self.month as usize - 1];
        if self.day_of_month < 1 || self.day_of_month > dim {
            return range(format!(
                "day {} outside 1..={dim} for month {}",
                self.day_of_month, self.month
            ));
        }
        if self.hour > 23 {
            return range(format!("hour {} outside 0..=23", self.hour));
        }
        let checks: [(&str, f64, bool); 8] = [
            ("diffuse_rad", self.diffuse_radiation, self.diffuse_radiation >= 0.0),
            ("beam_rad", self.beam_radiation, self.beam_radiation >= 0.0),
            ("wind_speed", self.wind_speed, self.wind_speed >= 0.0),
            (
                "wind_dir",
                self.wind_direction,
                (0.0..360.0).contains(&self.wind_direction),
            ),
            (
                "rel_humidity",
                self.relative_humidity,
                (0.0..=100.0).contains(&self.relative_humidity),
            ),
            ("precip", self.precipitation, self.precipitation >= 0.0),
            (
                "cloud_cover",
                self.cloud_cover,
                (0.0..=1.0).contains(&self.cloud_cover),
            ),
            (
                "temp",
                self.temperature,
                self.temperature.is_finite() && self.surface_temperature.is_finite(),
            ),
        ];
        for (name, v, ok) in checks {
            if !ok {
                return range(format!("{name} = {v} out of range"));
            }
        }
        let expected = hour_of_year(self.month, self.day_of_month, self.hour);
        if self.hour_of_year != expected {
            return range(format!(
                "hour_of_year {} inconsistent with month {}, day {}, hour {} (expected {expected})",
                self.hour_of_year, self.month, self.day_of_month, self.hour
            ));
        }
        Ok(())
    }
}

/// 1-based hour of a non-leap year.
pub fn hour_of_year(month: u32, day_of_month: u32, hour: u32) -> u32 {
    let days_before: u32 = DAYS_IN_MONTH[..(month as usize - 1).min(12)].iter().sum();
    (days_before + day_of_month - 1) * 24 + hour + 1
}

/// Inverse of [`hour_of_year`]: `(month, day_of_month, hour)`.
pub fn calendar_of(hour_of_year: u32) -> (u32, u32, u32) {
    let h0 = hour_of_year - 1;
    let mut day = h0 / 24;
    let hour = h0 % 24;
    let mut month = 1;
    for dim in DAYS_IN_MONTH {
        if day < dim {
            break;
        }
        day -= dim;
        month += 1;
    }
    (month, day + 1, hour)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub climate_id: String,
    pub records: Vec<WeatherRecord>,
    pub split_tag: Option<SplitTag>,
}

impl WeatherSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() != HOURS_PER_YEAR {
            return Err(Error::Length {
                expected: HOURS_PER_YEAR,
                found: self.records.len(),
            });
        }
        for (i, r) in self.records.iter().enumerate() {
            r.validate(i + 1)?;
            if r.hour_of_year as usize != i + 1 {
                return Err(Error::Invariant(format!(
                    "row {}: hour_of_year {} breaks the 1..=8760 sequence",
                    i + 1,
                    r.hour_of_year
                )));
            }
        }
        Ok(())
    }
}

/// Reads a weather CSV; the climate id is the file stem.
pub fn parse_weather_csv(path: impl AsRef<Path>) -> Result<WeatherSeries> {
    let path = path.as_ref();
    let climate_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Argument(format!("no climate id in path {}", path.display())))?
        .to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_weather_reader(&climate_id, std::io::BufReader::new(file))
}

pub fn parse_weather_str(climate_id: &str, text: &str) -> Result<WeatherSeries> {
    parse_weather_reader(climate_id, text.as_bytes())
}

pub fn parse_weather_reader<R: Read>(climate_id: &str, reader: R) -> Result<WeatherSeries> {
    let mut rdr = csv_reader(reader);
    let header = header_of(&mut rdr)?;
    let found: Vec<&str> = header.iter().map(String::as_str).collect();
    let with_hoy = found.last() == Some(&"hour_of_year");
    let expected: &[&str] = if with_hoy {
        &TEMPORAL_COLUMNS
    } else {
        &TEMPORAL_COLUMNS[..N_TEMPORAL - 1]
    };
    check_header(&found, expected)?;

    let mut records = Vec::with_capacity(HOURS_PER_YEAR);
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(e, row))?;
        check_width(&rec, expected.len(), row)?;
        let mut vals = [0.0; N_TEMPORAL];
        for (c, name) in expected.iter().enumerate() {
            vals[c] = parse_cell(&rec, c, row, name)?;
        }
        let int = |c: usize| -> Result<u32> {
            let v = vals[c];
            if v.fract() != 0.0 || !(0.0..=1e6).contains(&v) {
                return Err(Error::Range {
                    row,
                    message: format!("{} = {v} is not a non-negative integer", expected[c]),
                });
            }
            Ok(v as u32)
        };
        let (day, month, hour) = (int(0)?, int(1)?, int(2)?);
        if !(1..=12).contains(&month) {
            return Err(Error::Range {
                row,
                message: format!("month {month} outside 1..=12"),
            });
        }
        if day == 0 || day > DAYS_IN_MONTH[month as usize - 1] || hour > 23 {
            return Err(Error::Range {
                row,
                message: format!("invalid calendar position day {day}, hour {hour} in month {month}"),
            });
        }
        let hoy = if with_hoy {
            int(12)?
        } else {
            hour_of_year(month, day, hour)
        };
        let r = WeatherRecord {
            day_of_month: day,
            month,
            hour,
            diffuse_radiation: vals[3],
            beam_radiation: vals[4],
            temperature: vals[5],
            surface_temperature: vals[6],
            wind_speed: vals[7],
            wind_direction: vals[8],
            relative_humidity: vals[9],
            precipitation: vals[10],
            cloud_cover: vals[11],
            hour_of_year: hoy,
        };
        r.validate(row)?;
        if hoy as usize != row {
            return Err(Error::Invariant(format!(
                "row {row}: hour_of_year {hoy} breaks the 1..=8760 sequence"
            )));
        }
        records.push(r);
        if records.len() > HOURS_PER_YEAR {
            break;
        }
    }
    if records.len() != HOURS_PER_YEAR {
        return Err(Error::Length {
            expected: HOURS_PER_YEAR,
            found: records.len(),
        });
    }
    Ok(WeatherSeries {
        climate_id: climate_id.to_string(),
        records,
        split_tag: None,
    })
}

/// Writes the full 13-column form, including `hour_of_year`.
pub fn write_weather_csv<W: Write>(series: &WeatherSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Schema(format!("csv write failed: {e}"));
    w.write_record(TEMPORAL_COLUMNS).map_err(map)?;
    for r in &series.records {
        let cells = [
            r.day_of_month.to_string(),
            r.month.to_string(),
            r.hour.to_string(),
            fmt_f64(r.diffuse_radiation),
            fmt_f64(r.beam_radiation),
            fmt_f64(r.temperature),
            fmt_f64(r.surface_temperature),
            fmt_f64(r.wind_speed),
            fmt_f64(r.wind_direction),
            fmt_f64(r.relative_humidity),
            fmt_f64(r.precipitation),
            fmt_f64(r.cloud_cover),
            r.hour_of_year.to_string(),
        ];
        w.write_record(&cells).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io("<weather csv>", e))?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn flat_series(climate_id: &str, temp: f64) -> WeatherSeries {
        let records = (1..=HOURS_PER_YEAR as u32)
            .map(|h| {
                let (month, day, hour) = calendar_of(h);
                WeatherRecord {
                    day_of_month: day,
                    month,
                    hour,
                    diffuse_radiation: 0.0,
                    beam_radiation: 0.0,
                    temperature: temp,
                    surface_temperature: temp,
                    wind_speed: 2.0,
                    wind_direction: 180.0,
                    relative_humidity: 60.0,
                    precipitation: 0.0,
                    cloud_cover: 0.5,
                    hour_of_year: h,
                }
            })
            .collect();
        WeatherSeries {
            climate_id: climate_id.into(),
            records,
            split_tag: None,
        }
    }

    fn to_csv(series: &WeatherSeries) -> String {
        let mut buf = Vec::new();
        write_weather_csv(series, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn calendar_round_trip() {
        for h in 1..=HOURS_PER_YEAR as u32 {
            let (m, d, hr) = calendar_of(h);
            assert_eq!(hour_of_year(m, d, hr), h);
        }
        assert_eq!(hour_of_year(1, 1, 0), 1);
        assert_eq!(hour_of_year(12, 31, 23), 8760);
        assert_eq!(hour_of_year(3, 1, 0), (31 + 28) * 24 + 1);
    }

    #[test]
    fn valid_file_parses_to_8760_records() {
        let s = flat_series("x", 12.5);
        let parsed = parse_weather_str("x", &to_csv(&s)).unwrap();
        assert_eq!(parsed.len(), 8760);
        assert_eq!(parsed, s);
    }

    #[test]
    fn hour_of_year_is_filled_when_absent() {
        let s = flat_series("x", 3.0);
        let text: String = to_csv(&s)
            .lines()
            .map(|l| {
                let mut cells: Vec<&str> = l.split(',').collect();
                cells.pop();
                cells.join(",") + "\n"
            })
            .collect();
        let parsed = parse_weather_str("x", &text).unwrap();
        assert_eq!(parsed.records[100].hour_of_year, 101);
        assert_eq!(parsed, s);
    }

    #[test]
    fn short_file_is_a_length_error() {
        let text = to_csv(&flat_series("x", 1.0));
        let short: String = text.lines().take(8760).map(|l| format!("{l}\n")).collect();
        match parse_weather_str("x", &short) {
            Err(Error::Length { expected, found }) => {
                assert_eq!((expected, found), (8760, 8759));
            }
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn month_13_is_a_range_error_at_that_row() {
        let text = to_csv(&flat_series("x", 1.0));
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut cells: Vec<String> = lines[5].split(',').map(str::to_string).collect();
        cells[1] = "13".into();
        lines[5] = cells.join(",");
        match parse_weather_str("x", &lines.join("\n")) {
            Err(Error::Range { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn header_errors_name_the_column() {
        let bad = "day,month,hour,diffuse_rad,beam_rad,temp,surface_temp,wind_speed,wind_dir,rel_humidity,precip\n";
        let err = parse_weather_str("x", bad).unwrap_err().to_string();
        assert!(err.contains("cloud_cover"), "{err}");
        let extra = "day,month,hour,diffuse_rad,beam_rad,temp,surface_temp,wind_speed,wind_dir,rel_humidity,precip,cloud_cover,pressure\n";
        let err = parse_weather_str("x", extra).unwrap_err().to_string();
        assert!(err.contains("pressure"), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let text = to_csv(&flat_series("x", 1.0));
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut cells: Vec<String> = lines[42].split(',').map(str::to_string).collect();
        cells[5] = "warm".into();
        lines[42] = cells.join(",");
        match parse_weather_str("x", &lines.join("\n")) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 42);
                assert_eq!(column, "temp");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
