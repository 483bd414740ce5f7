use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// `x ↦ weights · x + bias`, with `weights` stored `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl AffineMap {
    pub fn new(weights: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias of length {} for {}x{} weights",
                bias.len(),
                weights.rows(),
                weights.cols()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("non-finite bias".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform weights in `±1/√in_dim`, zero bias.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weights: Matrix::from_vec(out_dim, in_dim, data).expect("sized buffer"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "map expects {}-dim input, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, &b)| {
                let v = (linalg::dot(w, x)? + b as f64) as f32;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite("affine map"))
                }
            })
            .collect()
    }

    /// Applies the map to every row of `x` (`count × in_dim`).
    pub fn apply_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = linalg::matmul_nt(x, &self.weights)?;
        let cols = out.cols();
        for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, alpha: f32) -> AffineMap {
        AffineMap {
            weights: self.weights.scaled(alpha),
            bias: self.bias.iter().map(|b| b * alpha).collect(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.weights.as_mut_slice(), &mut self.bias)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// The two translation maps: `h` into the target space, `g` back out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPair {
    pub h: AffineMap,
    pub g: AffineMap,
}
