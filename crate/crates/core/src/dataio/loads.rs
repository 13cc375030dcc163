use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    check_header, check_width, csv_error, csv_reader, fmt_f64, header_of, parse_cell,
    HOURS_PER_YEAR,
};
use crate::{Error, Result};

pub const LOADS_HEADER: [&str; 3] = ["hour_of_year", "heat_kwh", "cool_kwh"];

/// Hourly heating (>= 0) and cooling (<= 0) demand for one building in one climate, kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSeries {
    pub building_id: String,
    pub climate_id: String,
    pub heat: Vec<f64>,
    pub cool: Vec<f64>,
}

impl LoadSeries {
    pub fn validate(&self) -> Result<()> {
        for (name, ch) in [("heat", &self.heat), ("cool", &self.cool)] {
            if ch.len() != HOURS_PER_YEAR {
                return Err(Error::Length {
                    expected: HOURS_PER_YEAR,
                    found: ch.len(),
                });
            }
            let _ = name;
        }
        for (i, (&h, &c)) in self.heat.iter().zip(&self.cool).enumerate() {
            check_signs(h, c, i + 1)?;
        }
        Ok(())
    }

    /// `(channel 0, channel 1)` at hour index `t`.
    pub fn at(&self, t: usize) -> [f64; 2] {
        [self.heat[t], self.cool[t]]
    }
}

fn check_signs(heat: f64, cool: f64, row: usize) -> Result<()> {
    if !(heat >= 0.0) {
        return Err(Error::Range {
            row,
            message: format!("heat_kwh = {heat} must be >= 0"),
        });
    }
    if !(cool <= 0.0) {
        return Err(Error::Range {
            row,
            message: format!("cool_kwh = {cool} must be <= 0"),
        });
    }
    Ok(())
}

pub fn parse_loads_csv(
    path: impl AsRef<Path>,
    climate_id: &str,
    building_id: &str,
) -> Result<LoadSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_loads_reader(climate_id, building_id, std::io::BufReader::new(file))
}

pub fn parse_loads_str(climate_id: &str, building_id: &str, text: &str) -> Result<LoadSeries> {
    parse_loads_reader(climate_id, building_id, text.as_bytes())
}

pub fn parse_loads_reader<R: Read>(
    climate_id: &str,
    building_id: &str,
    reader: R,
) -> Result<LoadSeries> {
    let mut rdr = csv_reader(reader);
    let header = header_of(&mut rdr)?;
    let found: Vec<&str> = header.iter().map(String::as_str).collect();
    check_header(&found, &LOADS_HEADER)?;
    let mut heat = Vec::with_capacity(HOURS_PER_YEAR);
    let mut cool = Vec::with_capacity(HOURS_PER_YEAR);
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(e, row))?;
        check_width(&rec, 3, row)?;
        let hoy = parse_cell(&rec, 0, row, "hour_of_year")?;
        if hoy != row as f64 {
            return Err(Error::Invariant(format!(
                "row {row}: hour_of_year {hoy} breaks the 1..=8760 sequence"
            )));
        }
        let h = parse_cell(&rec, 1, row, "heat_kwh")?;
        let c = parse_cell(&rec, 2, row, "cool_kwh")?;
        check_signs(h, c, row)?;
        heat.push(h);
        cool.push(c);
        if heat.len() > HOURS_PER_YEAR {
            break;
        }
    }
    if heat.len() != HOURS_PER_YEAR {
        return Err(Error::Length {
            expected: HOURS_PER_YEAR,
            found: heat.len(),
        });
    }
    Ok(LoadSeries {
        building_id: building_id.to_string(),
        climate_id: climate_id.to_string(),
        heat,
        cool,
    })
}

pub fn write_loads_csv<W: Write>(loads: &LoadSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Schema(format!("csv write failed: {e}"));
    w.write_record(LOADS_HEADER).map_err(map)?;
    for (i, (h, c)) in loads.heat.iter().zip(&loads.cool).enumerate() {
        w.write_record([(i + 1).to_string(), fmt_f64(*h), fmt_f64(*c)])
            .map_err(map)?;
    }
    w.flush().map_err(|e| Error::io("<loads csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> LoadSeries {
        LoadSeries {
            building_id: "b".into(),
            climate_id: "c".into(),
            heat: (0..HOURS_PER_YEAR).map(|i| (i % 7) as f64 * 1.25).collect(),
            cool: (0..HOURS_PER_YEAR).map(|i| -((i % 5) as f64) * 0.5).collect(),
        }
    }

    fn text(l: &LoadSeries) -> String {
        let mut buf = Vec::new();
        write_loads_csv(l, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trips_exactly() {
        let l = series();
        assert_eq!(parse_loads_str("c", "b", &text(&l)).unwrap(), l);
    }

    #[test]
    fn positive_cooling_is_rejected() {
        let mut l = series();
        l.cool[10] = 0.1;
        assert!(matches!(
            parse_loads_str("c", "b", &text(&l)),
            Err(Error::Range { row: 11, .. })
        ));
        l.cool[10] = 0.0;
        l.heat[3] = -1.0;
        assert!(matches!(
            parse_loads_str("c", "b", &text(&l)),
            Err(Error::Range { row: 4, .. })
        ));
    }

    #[test]
    fn wrong_length_rejected() {
        let full = text(&series());
        let short: String = full.lines().take(100).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            parse_loads_str("c", "b", &short),
            Err(Error::Length { found: 99, .. })
        ));
    }
}
