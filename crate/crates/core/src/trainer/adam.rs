use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub timestep: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            timestep: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam step over {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient {} at parameter {i}",
            grads[i]
        )));
    }
    state.timestep += 1;
    let t = state.timestep as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g as f64;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let step = cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = (*p as f64 - step) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.25f32, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.25, -1.0]);
        assert_eq!(s.timestep, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0f32, 1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[1.0, -1.0], &mut s, &cfg).unwrap();
        assert!(((p[0] - 1.0) as f64 + 1e-3).abs() <= 1e-6);
        assert!(((p[1] - 1.0) as f64 - 1e-3).abs() <= 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(w) = ‖w − w*‖², unit distance start; minimizer known exactly
        let target = [0.6f32, -0.8, 0.0];
        let mut w = vec![0.0f32; 3];
        let mut s = AdamState::new(3);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..100 {
            let g: Vec<f32> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut w, &g, &mut s, &cfg).unwrap();
        }
        let dist: f32 = w.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        assert!(dist <= 1e-2, "distance {dist}");
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = vec![0.0f32];
        let mut s = AdamState::new(1);
        let err = adam_step(&mut p, &[f32::NAN], &mut s, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(s.timestep, 0);
    }
}
