//! Reconstruction and cycle-consistency losses with analytic gradients.
//!
//! Every term is a per-sample sum over feature dimensions averaged over the
//! batch. Reconstruction residuals are squared; cycle residuals enter as
//! plain L2 norms unless `cycle_squared` is set.

use serde::{Deserialize, Serialize};

use super::affine::AffineMap;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::num_format::sig9;

/// Paired image rows plus an optional, independently sized text batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    /// Target-model image features, `count × m`.
    pub target_image: &'a Matrix,
    /// Vision-language image features, `count × n`, row-paired with `target_image`.
    pub vl_image: &'a Matrix,
    /// Vision-language text features, `text_count × n`.
    pub vl_text: Option<&'a Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(serialize_with = "sig9")]
    pub mse: f64,
    /// `‖h(g(I_Φ)) − I_Φ‖`
    #[serde(serialize_with = "sig9")]
    pub cycle_target: f64,
    /// `‖g(h(I_Ψ)) − I_Ψ‖`
    #[serde(serialize_with = "sig9")]
    pub cycle_vl_image: f64,
    /// `‖g(h(T_Ψ)) − T_Ψ‖`, zero without text features.
    #[serde(serialize_with = "sig9")]
    pub cycle_vl_text: f64,
    #[serde(serialize_with = "sig9")]
    pub total: f64,
}

impl LossBreakdown {
    pub fn cycle(&self) -> f64 {
        self.cycle_target + self.cycle_vl_image + self.cycle_vl_text
    }

    pub fn is_finite(&self) -> bool {
        [self.mse, self.cycle(), self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl AffineGrad {
    fn zeros_like(map: &AffineMap) -> Self {
        Self {
            weights: Matrix::zeros(map.out_dim(), map.in_dim()),
            bias: vec![0.0; map.out_dim()],
        }
    }

    fn add(&mut self, other: &AffineGrad) {
        for (a, b) in self.weights.as_mut_slice().iter_mut().zip(other.weights.as_slice()) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn scale(&mut self, alpha: f32) {
        for a in self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut()) {
            *a *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub h: AffineGrad,
    pub g: AffineGrad,
}

fn check_dims(h: &AffineMap, g: &AffineMap, batch: &Batch<'_>) -> Result<()> {
    let (m, n) = (h.out_dim(), h.in_dim());
    if g.in_dim() != m || g.out_dim() != n {
        return Err(Error::Shape(format!(
            "h is {n}->{m} but g is {}->{}",
            g.in_dim(),
            g.out_dim()
        )));
    }
    if batch.target_image.cols() != m || batch.vl_image.cols() != n {
        return Err(Error::Shape(format!(
            "batch dims ({}, {}) do not match maps ({m}, {n})",
            batch.target_image.cols(),
            batch.vl_image.cols()
        )));
    }
    if batch.target_image.rows() != batch.vl_image.rows() {
        return Err(Error::Shape(format!(
            "unpaired image batches: {} vs {} rows",
            batch.target_image.rows(),
            batch.vl_image.rows()
        )));
    }
    if let Some(t) = batch.vl_text {
        if t.cols() != n {
            return Err(Error::Shape(format!("text batch is {}-dim, expected {n}", t.cols())));
        }
    }
    Ok(())
}

fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn col_sums(m: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.cols()];
    for row in m.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Scales row `i` of `m` by `factors[i]`.
fn scale_rows(m: &Matrix, factors: &[f64]) -> Matrix {
    let cols = m.cols();
    let mut data = Vec::with_capacity(m.as_slice().len());
    for (row, &f) in m.iter_rows().zip(factors) {
        data.extend(row.iter().map(|&v| (v as f64 * f) as f32));
    }
    Matrix::from_vec(m.rows(), cols, data).expect("same shape")
}

fn row_sq_norms(m: &Matrix) -> Vec<f64> {
    m.iter_rows().map(|r| linalg::dot(r, r).unwrap()).collect()
}

/// `mean_i ‖map(x_i) − y_i‖²` and its gradient.
fn reconstruction_term(map: &AffineMap, x: &Matrix, y: &Matrix, want_grad: bool) -> Result<(f64, Option<AffineGrad>)> {
    let count = x.rows();
    if count == 0 {
        return Ok((0.0, want_grad.then(|| AffineGrad::zeros_like(map))));
    }
    let resid = sub(&map.apply_batch(x)?, y);
    let value = row_sq_norms(&resid).iter().sum::<f64>() / count as f64;
    if !want_grad {
        return Ok((value, None));
    }
    let d = scale_rows(&resid, &vec![2.0 / count as f64; count]);
    let grad = AffineGrad {
        weights: linalg::matmul_tn(&d, x)?,
        bias: col_sums(&d),
    };
    Ok((value, Some(grad)))
}

/// `mean_i ‖second(first(x_i)) − x_i‖` (squared when `squared`) and its
/// gradients with respect to `first` and `second`.
fn cycle_term(
    first: &AffineMap,
    second: &AffineMap,
    x: &Matrix,
    squared: bool,
    want_grad: bool,
) -> Result<(f64, Option<(AffineGrad, AffineGrad)>)> {
    let count = x.rows();
    let zero = || (AffineGrad::zeros_like(first), AffineGrad::zeros_like(second));
    if count == 0 {
        return Ok((0.0, want_grad.then(zero)));
    }
    let mid = first.apply_batch(x)?;
    let resid = sub(&second.apply_batch(&mid)?, x);
    let sq = row_sq_norms(&resid);
    let inv_count = 1.0 / count as f64;
    let value = if squared {
        sq.iter().sum::<f64>() * inv_count
    } else {
        sq.iter().map(|v| v.sqrt()).sum::<f64>() * inv_count
    };
    if !want_grad {
        return Ok((value, None));
    }
    // d(loss)/d(resid_i); a zero residual contributes the zero subgradient
    let factors: Vec<f64> = sq
        .iter()
        .map(|&s| {
            if squared {
                2.0 * inv_count
            } else if s > 0.0 {
                inv_count / s.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let d_out = scale_rows(&resid, &factors);
    let grad_second = AffineGrad {
        weights: linalg::matmul_tn(&d_out, &mid)?,
        bias: col_sums(&d_out),
    };
    let d_mid = linalg::matmul(&d_out, &second.weights)?;
    let grad_first = AffineGrad {
        weights: linalg::matmul_tn(&d_mid, x)?,
        bias: col_sums(&d_mid),
    };
    Ok((value, Some((grad_first, grad_second))))
}

/// Mean over paired samples of `‖h(I_Ψ)−I_Φ‖² + ‖g(I_Φ)−I_Ψ‖²`.
pub fn reconstruction_loss(h: &AffineMap, g: &AffineMap, target_image: &Matrix, vl_image: &Matrix) -> Result<f64> {
    let batch = Batch {
        target_image,
        vl_image,
        vl_text: None,
    };
    check_dims(h, g, &batch)?;
    let (a, _) = reconstruction_term(h, vl_image, target_image, false)?;
    let (b, _) = reconstruction_term(g, target_image, vl_image, false)?;
    Ok(a + b)
}

/// Sum of the three cycle terms, each a batch mean of per-sample norms.
pub fn cycle_loss(h: &AffineMap, g: &AffineMap, batch: &Batch<'_>, squared: bool) -> Result<f64> {
    Ok(evaluate(h, g, batch, 1.0, squared)?.cycle())
}

/// `reconstruction_loss + cycle_weight · cycle_loss`.
pub fn total_loss(h: &AffineMap, g: &AffineMap, batch: &Batch<'_>, cycle_weight: f64, squared: bool) -> Result<f64> {
    Ok(evaluate(h, g, batch, cycle_weight, squared)?.total)
}

pub fn evaluate(h: &AffineMap, g: &AffineMap, batch: &Batch<'_>, cycle_weight: f64, squared: bool) -> Result<LossBreakdown> {
    Ok(loss_impl(h, g, batch, cycle_weight, squared, false)?.0)
}

/// Loss breakdown plus the gradient of `total` with respect to both maps.
pub fn loss_and_gradients(
    h: &AffineMap,
    g: &AffineMap,
    batch: &Batch<'_>,
    cycle_weight: f64,
    squared: bool,
) -> Result<(LossBreakdown, PairGrad)> {
    let (loss, grad) = loss_impl(h, g, batch, cycle_weight, squared, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn loss_impl(
    h: &AffineMap,
    g: &AffineMap,
    batch: &Batch<'_>,
    cycle_weight: f64,
    squared: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<PairGrad>)> {
    check_dims(h, g, batch)?;
    let (p, q) = (batch.target_image, batch.vl_image);

    let (mse_h, gh) = reconstruction_term(h, q, p, want_grad)?;
    let (mse_g, gg) = reconstruction_term(g, p, q, want_grad)?;
    let mut grads = want_grad.then(|| PairGrad {
        h: gh.unwrap(),
        g: gg.unwrap(),
    });

    let mut cycle = [0.0f64; 3];
    let lambda = cycle_weight as f32;
    let cycle_grad = want_grad && cycle_weight != 0.0;
    // Φ → Ψ → Φ runs g then h; the Ψ cycles run h then g
    let (v, gr) = cycle_term(g, h, p, squared, cycle_grad)?;
    cycle[0] = v;
    if let (Some(acc), Some((mut d_g, mut d_h))) = (grads.as_mut(), gr) {
        d_g.scale(lambda);
        d_h.scale(lambda);
        acc.g.add(&d_g);
        acc.h.add(&d_h);
    }
    for (slot, x) in std::iter::once(q).chain(batch.vl_text).enumerate() {
        let (v, gr) = cycle_term(h, g, x, squared, cycle_grad)?;
        cycle[slot + 1] = v;
        if let (Some(acc), Some((mut d_h, mut d_g))) = (grads.as_mut(), gr) {
            d_h.scale(lambda);
            d_g.scale(lambda);
            acc.h.add(&d_h);
            acc.g.add(&d_g);
        }
    }

    let mse = mse_h + mse_g;
    let loss = LossBreakdown {
        mse,
        cycle_target: cycle[0],
        cycle_vl_image: cycle[1],
        cycle_vl_text: cycle[2],
        total: mse + cycle_weight * cycle.iter().sum::<f64>(),
    };
    Ok((loss, grads))
}
