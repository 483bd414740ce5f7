//! Closed-form affine least squares, used as the reference solution for the
//! reconstruction objective.

use super::affine::AffineMap;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Ridge added to the diagonal of the normal equations.
pub const OLS_RIDGE: f64 = 1e-6;

/// Affine least-squares fit `Y ≈ X Wᵀ + b` via the normal equations of the
/// bias-augmented design, solved by Cholesky in `f64`.
pub fn ols_fit(x: &Matrix, y: &Matrix) -> Result<AffineMap> {
    let (count, d) = x.shape();
    let out = y.cols();
    if y.rows() != count {
        return Err(Error::Shape(format!("{count} inputs but {} targets", y.rows())));
    }
    if count < d + 1 {
        return Err(Error::Precondition(format!(
            "affine fit in {d} dims needs at least {} samples, got {count}",
            d + 1
        )));
    }
    let k = d + 1;
    let mut gram = vec![0.0f64; k * k];
    let mut rhs = vec![0.0f64; k * out];
    let mut xa = vec![1.0f64; k];
    for (xr, yr) in x.iter_rows().zip(y.iter_rows()) {
        for (slot, &v) in xa.iter_mut().zip(xr) {
            *slot = v as f64;
        }
        for i in 0..k {
            let xi = xa[i];
            for j in 0..=i {
                gram[i * k + j] += xi * xa[j];
            }
            for (r, &yv) in rhs[i * out..(i + 1) * out].iter_mut().zip(yr) {
                *r += xi * yv as f64;
            }
        }
    }
    for i in 0..k {
        gram[i * k + i] += OLS_RIDGE;
        for j in 0..i {
            gram[j * k + i] = gram[i * k + j];
        }
    }
    let chol = cholesky(&gram, k)?;
    let coef = cholesky_solve(&chol, k, &rhs, out);

    let mut weights = vec![0.0f32; out * d];
    for o in 0..out {
        for j in 0..d {
            weights[o * d + j] = coef[j * out + o] as f32;
        }
    }
    let bias = (0..out).map(|o| coef[d * out + o] as f32).collect();
    let map = AffineMap::new(Matrix::from_vec(out, d, weights)?, bias)?;
    if !map.is_finite() {
        return Err(Error::Numerical("least-squares solution is not finite".into()));
    }
    Ok(map)
}

/// Lower-triangular factor of a symmetric positive definite `k × k` matrix.
fn cholesky(a: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; k * k];
    let scale = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(s > scale * 1e-15) {
                    return Err(Error::Numerical(format!(
                        "normal equations are rank deficient (pivot {s:e} at column {i})"
                    )));
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` for `X` with `B` stored `k × cols` row-major.
fn cholesky_solve(l: &[f64], k: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for c in 0..cols {
        for i in 0..k {
            let mut s = x[i * cols + c];
            for p in 0..i {
                s -= l[i * k + p] * x[p * cols + c];
            }
            x[i * cols + c] = s / l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = x[i * cols + c];
            for p in i + 1..k {
                s -= l[p * k + i] * x[p * cols + c];
            }
            x[i * cols + c] = s / l[i * k + i];
        }
    }
    x
}
