use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` = number of rows.
    FanIn,
    Zeros,
    Ones,
    Constant(f64),
}

/// Named parameter tensors with matching gradient buffers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
    #[serde(skip)]
    pub grads: Vec<Mat>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let t = match init {
            Init::FanIn => {
                let bound = 1.0 / (rows as f64).sqrt();
                Mat::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
            }
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Ones => Mat::filled(rows, cols, 1.0),
            Init::Constant(v) => Mat::filled(rows, cols, v),
        };
        self.names.push(name);
        self.grads.push(Mat::zeros(rows, cols));
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn zero_grads(&mut self) {
        if self.grads.len() != self.tensors.len() {
            self.grads = self.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        }
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds `scale * g` for every `(index, g)` pair.
    pub fn accumulate(&mut self, grads: &[(usize, Mat)], scale: f64) {
        if self.grads.len() != self.tensors.len() {
            self.zero_grads();
        }
        for (i, g) in grads {
            for (a, b) in self.grads[*i].data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    /// Copies tensors from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Incompatible(
                "parameter names differ from the model layout".into(),
            ));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` has shape {:?}, layout expects {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        self.tensors = other.tensors.clone();
        self.zero_grads();
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }
}
