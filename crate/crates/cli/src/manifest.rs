use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use citytft::Error;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Everything needed to repeat a command: resolved configuration, inputs and outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, threads: Option<usize>) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().collect(),
            threads,
            seed: None,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.to_path_buf());
        self
    }

    pub fn output(mut self, key: &str, path: &Path) -> Self {
        self.outputs.insert(key.into(), path.to_path_buf());
        self
    }

    pub fn write(&self, path: &Path) -> citytft::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.into(),
                source: e,
            })?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
    }
}
