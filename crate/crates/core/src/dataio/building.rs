use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    check_header, check_width, csv_error, csv_reader, fmt_f64, header_of, parse_cell, N_STATIC,
    STATIC_COLUMNS,
};
use crate::{Error, Result};

/// Static building covariates. Lengths in m, areas in m², U-values in W/m²K,
/// setpoints in °C, ratios and reflectances as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingStatic {
    pub building_id: String,
    pub height: f64,
    pub perimeter: f64,
    pub wall_glazing_ratio: f64,
    pub footprint_area: f64,
    pub heating_setpoint: f64,
    pub cooling_setpoint: f64,
    pub wall_u_value: f64,
    pub roof_u_value: f64,
    pub floor_u_value: f64,
    pub window_u_value: f64,
    pub wall_sw_reflectance_avg: f64,
    pub wall_sw_reflectance: f64,
    pub roof_sw_reflectance: f64,
}

impl BuildingStatic {
    /// The 13 covariates in [`STATIC_COLUMNS`] order.
    pub fn covariates(&self) -> [f64; N_STATIC] {
        [
            self.height,
            self.perimeter,
            self.wall_glazing_ratio,
            self.footprint_area,
            self.heating_setpoint,
            self.cooling_setpoint,
            self.wall_u_value,
            self.roof_u_value,
            self.floor_u_value,
            self.window_u_value,
            self.wall_sw_reflectance_avg,
            self.wall_sw_reflectance,
            self.roof_sw_reflectance,
        ]
    }

    pub fn from_covariates(building_id: impl Into<String>, v: [f64; N_STATIC]) -> Self {
        BuildingStatic {
            building_id: building_id.into(),
            height: v[0],
            perimeter: v[1],
            wall_glazing_ratio: v[2],
            footprint_area: v[3],
            heating_setpoint: v[4],
            cooling_setpoint: v[5],
            wall_u_value: v[6],
            roof_u_value: v[7],
            floor_u_value: v[8],
            window_u_value: v[9],
            wall_sw_reflectance_avg: v[10],
            wall_sw_reflectance: v[11],
            roof_sw_reflectance: v[12],
        }
    }

    /// `row` is only used for error reporting.
    pub fn validate(&self, row: usize) -> Result<()> {
        let range = |message: String| Err(Error::Range { row, message });
        if self.building_id.trim().is_empty() {
            return range("empty building_id".into());
        }
        for (name, v) in STATIC_COLUMNS.iter().zip(self.covariates()) {
            if !v.is_finite() {
                return range(format!("{name} is not finite"));
            }
        }
        for (name, v) in [
            ("glazing_ratio", self.wall_glazing_ratio),
            ("wall_refl_avg", self.wall_sw_reflectance_avg),
            ("wall_refl", self.wall_sw_reflectance),
            ("roof_refl", self.roof_sw_reflectance),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return range(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("wall_u", self.wall_u_value),
            ("roof_u", self.roof_u_value),
            ("floor_u", self.floor_u_value),
            ("window_u", self.window_u_value),
            ("footprint", self.footprint_area),
            ("height", self.height),
            ("perimeter", self.perimeter),
        ] {
            if v <= 0.0 {
                return range(format!("{name} = {v} must be positive"));
            }
        }
        if self.heating_setpoint >= self.cooling_setpoint {
            return Err(Error::Invariant(format!(
                "row {row}: heat_setpoint {} must be below cool_setpoint {}",
                self.heating_setpoint, self.cooling_setpoint
            )));
        }
        Ok(())
    }
}

pub fn parse_building_csv(path: impl AsRef<Path>) -> Result<Vec<BuildingStatic>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_buildings_reader(std::io::BufReader::new(file))
}

pub fn parse_buildings_str(text: &str) -> Result<Vec<BuildingStatic>> {
    parse_buildings_reader(text.as_bytes())
}

pub fn parse_buildings_reader<R: Read>(reader: R) -> Result<Vec<BuildingStatic>> {
    let mut rdr = csv_reader(reader);
    let header = header_of(&mut rdr)?;
    let found: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut expected = vec!["building_id"];
    expected.extend(STATIC_COLUMNS);
    check_header(&found, &expected)?;

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(e, row))?;
        check_width(&rec, expected.len(), row)?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let mut v = [0.0; N_STATIC];
        for (c, name) in STATIC_COLUMNS.iter().enumerate() {
            v[c] = parse_cell(&rec, c + 1, row, name)?;
        }
        let b = BuildingStatic::from_covariates(id, v);
        b.validate(row)?;
        if !seen.insert(b.building_id.clone()) {
            return Err(Error::Duplicate {
                kind: "building_id",
                id: b.building_id,
            });
        }
        out.push(b);
    }
    Ok(out)
}

pub fn write_building_csv<W: Write>(buildings: &[BuildingStatic], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Schema(format!("csv write failed: {e}"));
    let mut header = vec!["building_id"];
    header.extend(STATIC_COLUMNS);
    w.write_record(&header).map_err(map)?;
    for b in buildings {
        let mut cells = vec![b.building_id.clone()];
        cells.extend(b.covariates().iter().map(|v| fmt_f64(*v)));
        w.write_record(&cells).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io("<building csv>", e))?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_building(id: &str) -> BuildingStatic {
        BuildingStatic::from_covariates(
            id,
            [
                12.0, 120.0, 0.3, 800.0, 20.0, 24.0, 0.5, 0.3, 0.4, 2.5, 0.35, 0.3, 0.2,
            ],
        )
    }

    fn csv_of(bs: &[BuildingStatic]) -> String {
        let mut buf = Vec::new();
        write_building_csv(bs, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn parses_many_buildings_in_order() {
        let bs: Vec<_> = (0..114)
            .map(|i| {
                let mut b = sample_building(&format!("b{i:03}"));
                b.height += i as f64 * 0.1;
                b
            })
            .collect();
        let parsed = parse_buildings_str(&csv_of(&bs)).unwrap();
        assert_eq!(parsed.len(), 114);
        assert_eq!(parsed, bs);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse_buildings_str(&csv_of(&[])).unwrap().is_empty());
    }

    #[test]
    fn glazing_above_one_is_range_error() {
        let mut b = sample_building("a");
        b.wall_glazing_ratio = 1.2;
        assert!(matches!(
            parse_buildings_str(&csv_of(&[b])),
            Err(Error::Range { row: 1, .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let bs = [sample_building("a"), sample_building("a")];
        assert!(matches!(
            parse_buildings_str(&csv_of(&bs)),
            Err(Error::Duplicate { .. })
        ));
    }

    #[test]
    fn inverted_setpoints_rejected() {
        let mut b = sample_building("a");
        b.heating_setpoint = 25.0;
        assert!(matches!(
            parse_buildings_str(&csv_of(&[b])),
            Err(Error::Invariant(_))
        ));
    }
}
