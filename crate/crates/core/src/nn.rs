//! Dense layers, per-Gaussian query rows, and the named-tensor weight file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Variance below which layer norm returns its bias.
pub const LN_VAR_FLOOR: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-5;

/// One feature row per Gaussian, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Queries {
    pub width: usize,
    pub data: Vec<f64>,
}

impl Queries {
    pub fn zeros(n: usize, width: usize) -> Self {
        Queries {
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(validation("query rows have different widths"));
        }
        Ok(Queries {
            width,
            data: rows.concat(),
        })
    }

    pub fn random<R: Rng>(rng: &mut R, n: usize, width: usize, amplitude: f64) -> Self {
        Queries {
            width,
            data: (0..n * width).map(|_| rng.random_range(-amplitude..amplitude)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y = W x + b` with `W` stored `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±gain/√in`; bias drawn the same way.
    pub fn random<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        let a = gain / (in_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-a..=a)).collect::<Vec<_>>();
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        self.accumulate(x, &mut y);
        y
    }

    /// `y += W x` (no bias).
    pub fn accumulate(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, yo) in y.iter_mut().enumerate() {
            let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn store(&self, w: &mut WeightFile, name: &str) {
        w.insert(format!("{name}.weight"), vec![self.out_dim, self.in_dim], self.weight.clone());
        w.insert(format!("{name}.bias"), vec![self.out_dim], self.bias.clone());
    }

    pub fn load(w: &WeightFile, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            in_dim,
            out_dim,
            weight: w.get(&format!("{name}.weight"), &[out_dim, in_dim])?.to_vec(),
            bias: w.get(&format!("{name}.bias"), &[out_dim])?.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
        }
    }

    /// Normalizes `x` in place. A vector with variance below
    /// [`LN_VAR_FLOOR`] maps to the bias.
    pub fn apply(&self, x: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var < LN_VAR_FLOOR {
            x.copy_from_slice(&self.bias);
            return;
        }
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - mean) * inv * self.gain[i] + self.bias[i];
        }
    }

    pub fn store(&self, w: &mut WeightFile, name: &str) {
        w.insert(format!("{name}.gain"), vec![self.gain.len()], self.gain.clone());
        w.insert(format!("{name}.bias"), vec![self.bias.len()], self.bias.clone());
    }

    pub fn load(w: &WeightFile, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: w.get(&format!("{name}.gain"), &[width])?.to_vec(),
            bias: w.get(&format!("{name}.bias"), &[width])?.to_vec(),
        })
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors keyed like `round0.gce.semantic_proj.weight`, stored as a
/// JSON object of `{"shape": [...], "data": [...]}` entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightFile {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightFile {
    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name, Tensor { shape, data });
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| validation(format!("weight file is missing tensor {name}")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(validation(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(validation(format!("tensor {name} has non-finite entries")));
        }
        Ok(&t.data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
