//! Loading and writing a whole dataset directory.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    assign_splits, compute_norm_stats, make_windows, parse_building_csv, parse_loads_csv,
    parse_weather_csv, write_building_csv, write_loads_csv, write_weather_csv, BuildingStatic,
    DatasetSplit, LoadSeries, NormalizationStats, SampleWindow, SplitManifest, SplitTag,
    WeatherSeries,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUILDINGS_FILE: &str = "buildings.csv";
pub const WEATHER_DIR: &str = "weather";
pub const LOADS_DIR: &str = "loads";

/// All inputs of one dataset, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sorted by building id.
    pub buildings: Vec<BuildingStatic>,
    /// Sorted by climate id, tagged with their split.
    pub climates: Vec<WeatherSeries>,
    /// Keyed by `(climate_id, building_id)`.
    pub loads: BTreeMap<(String, String), LoadSeries>,
    pub manifest: SplitManifest,
    pub split: DatasetSplit,
}

/// The windows of one split plus the index range each `(climate, building)` pair occupies.
#[derive(Debug, Clone, Default)]
pub struct SplitWindows {
    pub windows: Vec<SampleWindow>,
    pub pairs: Vec<PairRange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRange {
    pub climate_id: String,
    pub building_id: String,
    pub range: Range<usize>,
}

pub fn weather_path(dir: &Path, climate_id: &str) -> PathBuf {
    dir.join(WEATHER_DIR).join(format!("{climate_id}.csv"))
}

pub fn loads_path(dir: &Path, climate_id: &str, building_id: &str) -> PathBuf {
    dir.join(LOADS_DIR).join(climate_id).join(format!("{building_id}.csv"))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn new(
        mut buildings: Vec<BuildingStatic>,
        mut climates: Vec<WeatherSeries>,
        loads: Vec<LoadSeries>,
        manifest: SplitManifest,
    ) -> Result<Self> {
        buildings.sort_by(|a, b| a.building_id.cmp(&b.building_id));
        climates.sort_by(|a, b| a.climate_id.cmp(&b.climate_id));
        let split = assign_splits(&mut climates, &manifest)?;
        let mut map = BTreeMap::new();
        for l in loads {
            let key = (l.climate_id.clone(), l.building_id.clone());
            if map.insert(key, l).is_some() {
                return Err(Error::Duplicate {
                    kind: "load series",
                    id: "(climate, building) pair".into(),
                });
            }
        }
        for w in &climates {
            for b in &buildings {
                if !map.contains_key(&(w.climate_id.clone(), b.building_id.clone())) {
                    return Err(Error::Invariant(format!(
                        "no loads for climate `{}`, building `{}`",
                        w.climate_id, b.building_id
                    )));
                }
            }
        }
        Ok(Dataset {
            buildings,
            climates,
            loads: map,
            manifest,
            split,
        })
    }

    /// Reads `<dir>/manifest.json`, `buildings.csv`, every `weather/*.csv`
    /// and the loads for every (climate, building) pair.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = SplitManifest::from_path(dir.join(MANIFEST_FILE))?;
        let buildings = parse_building_csv(dir.join(BUILDINGS_FILE))?;
        let wdir = dir.join(WEATHER_DIR);
        let mut weather_files: Vec<PathBuf> = std::fs::read_dir(&wdir)
            .map_err(|e| Error::io(&wdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        weather_files.sort();
        let climates: Vec<WeatherSeries> = weather_files
            .par_iter()
            .map(parse_weather_csv)
            .collect::<Result<_>>()?;
        let pairs: Vec<(String, String)> = climates
            .iter()
            .flat_map(|w| {
                buildings
                    .iter()
                    .map(move |b| (w.climate_id.clone(), b.building_id.clone()))
            })
            .collect();
        let loads: Vec<LoadSeries> = pairs
            .par_iter()
            .map(|(c, b)| parse_loads_csv(loads_path(dir, c, b), c, b))
            .collect::<Result<_>>()?;
        Dataset::new(buildings, climates, loads, manifest)
    }

    /// Writes every file of the dataset under `dir`, each atomically.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest.to_json_string().as_bytes())?;
        let mut buf = Vec::new();
        write_building_csv(&self.buildings, &mut buf)?;
        write_atomic(&dir.join(BUILDINGS_FILE), &buf)?;
        self.climates.par_iter().try_for_each(|w| {
            let mut buf = Vec::new();
            write_weather_csv(w, &mut buf)?;
            write_atomic(&weather_path(dir, &w.climate_id), &buf)
        })?;
        self.loads.par_iter().try_for_each(|((c, b), l)| {
            let mut buf = Vec::new();
            write_loads_csv(l, &mut buf)?;
            write_atomic(&loads_path(dir, c, b), &buf)
        })
    }

    pub fn climates_in(&self, tag: SplitTag) -> impl Iterator<Item = &WeatherSeries> {
        self.climates
            .iter()
            .filter(move |w| w.split_tag == Some(tag))
    }

    /// Normalization statistics from the train split only.
    pub fn train_stats(&self) -> Result<NormalizationStats> {
        let weather: Vec<&WeatherSeries> = self.climates_in(SplitTag::Train).collect();
        let loads: Vec<&LoadSeries> = self
            .loads
            .values()
            .filter(|l| weather.iter().any(|w| w.climate_id == l.climate_id))
            .collect();
        compute_norm_stats(&weather, &self.buildings, &loads)
    }

    /// Windows of one split ordered by climate id, building id, start hour.
    pub fn windows(&self, tag: SplitTag, stats: &NormalizationStats, stride: usize) -> Result<SplitWindows> {
        let jobs: Vec<(&WeatherSeries, &BuildingStatic)> = self
            .climates_in(tag)
            .flat_map(|w| self.buildings.iter().map(move |b| (w, b)))
            .collect();
        let per_pair: Vec<Vec<SampleWindow>> = jobs
            .par_iter()
            .map(|(w, b)| {
                let l = &self.loads[&(w.climate_id.clone(), b.building_id.clone())];
                make_windows(b, w, l, stats, stride)
            })
            .collect::<Result<_>>()?;
        let mut out = SplitWindows::default();
        for ((w, b), wins) in jobs.iter().zip(per_pair) {
            let start = out.windows.len();
            out.windows.extend(wins);
            out.pairs.push(PairRange {
                climate_id: w.climate_id.clone(),
                building_id: b.building_id.clone(),
                range: start..out.windows.len(),
            });
        }
        Ok(out)
    }
}
