//! Dense row-major `f32` matrices with `f64` accumulation.
//!
//! One row is one sample (or one concept). Every reduction accumulates in
//! `f64` and each output entry is produced by a fixed sequential loop, so the
//! parallel and sequential kernels are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How row-parallel kernels are executed.
///
/// `Parallel` needs the `parallel` feature; without it the kernels run
/// sequentially regardless of the requested mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    fn check_finite(self, op: &'static str) -> Result<Matrix> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

fn fill_rows<F>(out: &mut Matrix, exec: Execution, kernel: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    let cols = out.cols;
    if cols == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            out.data
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| kernel(i, row));
        }
        _ => out
            .data
            .chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row)),
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Execution::default())
}

pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Execution) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    fill_rows(&mut out, exec, |i, row| {
        let mut acc = vec![0.0f64; b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = aik as f64;
            for (slot, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *slot += aik * bkj as f64;
            }
        }
        for (o, v) in row.iter_mut().zip(acc) {
            *o = v as f32;
        }
    });
    out.check_finite("matmul")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_nt_with(a, b, Execution::default())
}

pub fn matmul_nt_with(a: &Matrix, b: &Matrix, exec: Execution) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    fill_rows(&mut out, exec, |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot_f64(ai, b.row(j)) as f32;
        }
    });
    out.check_finite("matmul_nt")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_tn_with(a, b, Execution::default())
}

pub fn matmul_tn_with(a: &Matrix, b: &Matrix, exec: Execution) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    fill_rows(&mut out, exec, |i, row| {
        let mut acc = vec![0.0f64; b.cols];
        for r in 0..a.rows {
            let ari = a.data[r * a.cols + i] as f64;
            if ari == 0.0 {
                continue;
            }
            for (slot, &brj) in acc.iter_mut().zip(b.row(r)) {
                *slot += ari * brj as f64;
            }
        }
        for (o, v) in row.iter_mut().zip(acc) {
            *o = v as f32;
        }
    });
    out.check_finite("matmul_tn")
}

fn dot_f64(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn dot(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "dot of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(dot_f64(u, v))
}

pub fn norm(v: &[f32]) -> f64 {
    dot_f64(v, v).sqrt()
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    let d = dot(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if !(n > 1e-12) {
        return Err(Error::Degenerate(format!("cannot normalize vector of norm {n:e}")));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "frobenius distance of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}
