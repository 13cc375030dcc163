//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "CTFTCKPT"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of JSON (configs, statistics, tensor names and shapes)
//! n_values  u64
//! values    n_values f64: parameters, then Adam first and second moments if present
//! crc32     u32 over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::NormalizationStats;
use crate::model::{Model, ModelConfig, ModelKind, ParameterStore};
use crate::tensor::Mat;
use crate::train::{AdamState, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CTFTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model_cfg: ModelConfig,
    pub stats: NormalizationStats,
    pub params: ParameterStore,
    pub optimizer: Option<AdamState>,
    pub train_cfg: Option<TrainConfig>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    model_cfg: ModelConfig,
    stats: NormalizationStats,
    tensors: Vec<TensorInfo>,
    optimizer_step: Option<u64>,
    train_cfg: Option<TrainConfig>,
    epoch: usize,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| integrity("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, stats: &NormalizationStats) -> Self {
        Checkpoint {
            kind: model.kind,
            model_cfg: model.cfg.clone(),
            stats: stats.clone(),
            params: model.params.clone(),
            optimizer: None,
            train_cfg: None,
            epoch: 0,
            best_epoch: None,
            best_score: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            model_cfg: self.model_cfg.clone(),
            stats: self.stats.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            train_cfg: self.train_cfg.clone(),
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_score: self.best_score,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut values: Vec<&Mat> = self.params.tensors.iter().collect();
        if let Some(o) = &self.optimizer {
            values.extend(&o.m);
            values.extend(&o.v);
        }
        let n: usize = values.iter().map(|m| m.len()).sum();

        let mut out = Vec::with_capacity(32 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for m in values {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 4 {
            return Err(integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(integrity("bad magic bytes"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(integrity("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hdr_len = usize::try_from(r.u64()?).map_err(|_| integrity("header length overflow"))?;
        let header: Header = serde_json::from_slice(r.take(hdr_len)?)
            .map_err(|e| integrity(format!("malformed header: {e}")))?;
        let n = usize::try_from(r.u64()?).map_err(|_| integrity("value count overflow"))?;
        let n_params: usize = header
            .tensors
            .iter()
            .map(|t| t.rows.checked_mul(t.cols))
            .try_fold(0usize, |acc, x| x.and_then(|x| acc.checked_add(x)))
            .ok_or_else(|| integrity("tensor sizes overflow"))?;
        let expected = if header.optimizer_step.is_some() {
            n_params.checked_mul(3)
        } else {
            Some(n_params)
        };
        if expected != Some(n) {
            return Err(integrity(format!(
                "value count {n} does not match tensor shapes ({n_params} parameters)"
            )));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| integrity("value count overflow"))?)?;
        if r.pos != body.len() {
            return Err(integrity("trailing bytes after values"));
        }
        let mut vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read_set = || -> Vec<Mat> {
            header
                .tensors
                .iter()
                .map(|t| Mat::from_vec(t.rows, t.cols, vals.by_ref().take(t.rows * t.cols).collect()))
                .collect()
        };
        let tensors = read_set();
        let optimizer = header.optimizer_step.map(|step| AdamState {
            step,
            m: read_set(),
            v: read_set(),
        });
        let params = ParameterStore {
            names: header.tensors.iter().map(|t| t.name.clone()).collect(),
            grads: tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect(),
            tensors,
        };
        header.model_cfg.validate()?;
        header.stats.validate()?;
        Ok(Checkpoint {
            kind: header.kind,
            model_cfg: header.model_cfg,
            stats: header.stats,
            params,
            optimizer,
            train_cfg: header.train_cfg,
            epoch: header.epoch,
            best_epoch: header.best_epoch,
            best_score: header.best_score,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model, refusing parameters that do not fit the stored configuration.
    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.kind, self.model_cfg.clone())?;
        m.params.load_from(&self.params)?;
        Ok(m)
    }

    pub fn ensure_compatible(&self, kind: ModelKind, cfg: &ModelConfig) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Incompatible(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        if &self.model_cfg != cfg {
            return Err(Error::Incompatible(format!(
                "checkpoint model configuration {:?} differs from {:?}",
                self.model_cfg, cfg
            )));
        }
        Ok(())
    }
}
