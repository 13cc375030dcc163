use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::WeatherSeries;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Manifest(format!(
                "unknown split tag `{other}` (expected train, val or test)"
            ))),
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps each climate id to the split it belongs to.
///
/// Serialized as a flat JSON object. A climate listed twice with different
/// tags is rejected rather than silently resolved.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct SplitManifest(pub BTreeMap<String, SplitTag>);

impl<'de> Deserialize<'de> for SplitManifest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = SplitManifest;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping climate ids to \"train\", \"val\" or \"test\"")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, SplitTag>()? {
                    if let Some(prev) = out.insert(k.clone(), v) {
                        if prev != v {
                            return Err(serde::de::Error::custom(format!(
                                "climate `{k}` tagged both {prev} and {v}"
                            )));
                        }
                    }
                }
                Ok(SplitManifest(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl SplitManifest {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn tag(&self, climate_id: &str) -> Option<SplitTag> {
        self.0.get(climate_id).copied()
    }
}

/// Climate ids per split, each list sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn climates(&self, tag: SplitTag) -> &[String] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Tags every climate from the manifest; membership depends on the climate id alone.
pub fn assign_splits(climates: &mut [WeatherSeries], manifest: &SplitManifest) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for w in climates.iter_mut() {
        let tag = manifest.tag(&w.climate_id).ok_or_else(|| {
            Error::Manifest(format!("climate `{}` has no split tag", w.climate_id))
        })?;
        w.split_tag = Some(tag);
        match tag {
            SplitTag::Train => split.train.push(w.climate_id.clone()),
            SplitTag::Val => split.val.push(w.climate_id.clone()),
            SplitTag::Test => split.test.push(w.climate_id.clone()),
        }
    }
    for list in [&mut split.train, &mut split.val, &mut split.test] {
        list.sort();
        if list.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Duplicate {
                kind: "climate",
                id: list.windows(2).find(|p| p[0] == p[1]).unwrap()[0].clone(),
            });
        }
    }
    for id in manifest.0.keys() {
        if !climates.iter().any(|w| &w.climate_id == id) {
            log::warn!("manifest tags climate `{id}` but no weather file exists for it");
        }
    }
    if split.val.is_empty() {
        log::warn!("validation split is empty");
    }
    if split.test.is_empty() {
        log::warn!("test split is empty");
    }
    let (tr, va, te) = split.counts();
    log::info!("split: {tr} train / {va} val / {te} test climates");
    Ok(split)
}
