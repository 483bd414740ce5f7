//! Independent oracles used by the acceptance suite.
//!
//! Nothing here calls into the code under test beyond reading plain
//! parameters out of its types.

use textcav_core::trainer::AffineMap;

/// Binomial pmf `P(X = k)` for `X ~ Bin(n, p)`, computed in log space.
pub fn binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let ln_choose: f64 = (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum();
    let (kf, nf) = (k as f64, n as f64);
    let ln = ln_choose + kf * p.ln() + (nf - kf) * (1.0 - p).ln();
    ln.exp()
}

/// Equal-tailed acceptance interval `[lo, hi]` for `Bin(n, p)` at the given
/// confidence: the largest `lo` with `P(X < lo) ≤ α/2` and the smallest
/// `hi` with `P(X > hi) ≤ α/2`.
pub fn binomial_interval(n: u64, p: f64, confidence: f64) -> (u64, u64) {
    let tail = (1.0 - confidence) / 2.0;
    let pmf: Vec<f64> = (0..=n).map(|k| binomial_pmf(n, k, p)).collect();
    let mut lo = 0;
    let mut below = 0.0;
    while lo < n && below + pmf[lo as usize] <= tail {
        below += pmf[lo as usize];
        lo += 1;
    }
    let mut hi = n;
    let mut above = 0.0;
    while hi > 0 && above + pmf[hi as usize] <= tail {
        above += pmf[hi as usize];
        hi -= 1;
    }
    (lo, hi)
}

fn augmented(map: &AffineMap) -> Vec<f64> {
    let (rows, cols) = (map.out_dim(), map.in_dim());
    let w = map.weights.as_slice();
    let mut out = Vec::with_capacity(rows * (cols + 1));
    for i in 0..rows {
        out.extend(w[i * cols..(i + 1) * cols].iter().map(|&v| v as f64));
        out.push(map.bias[i] as f64);
    }
    out
}

/// `‖[W_a | b_a] − [W_b | b_b]‖_F / ‖[W_b | b_b]‖_F`.
pub fn rel_frobenius(estimate: &AffineMap, reference: &AffineMap) -> f64 {
    assert_eq!(
        (estimate.out_dim(), estimate.in_dim()),
        (reference.out_dim(), reference.in_dim()),
        "maps of different shape"
    );
    let (a, b) = (augmented(estimate), augmented(reference));
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    (diff / base).sqrt()
}

/// `‖a − b‖ / ‖b‖` for flat vectors.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    (diff / base).sqrt()
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_differences(x: &[f32], step: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            // the realized step, since x ± step is rounded to f32
            let width = (x[i] + step) as f64 - (x[i] - step) as f64;
            (up - down) / width
        })
        .collect()
}
