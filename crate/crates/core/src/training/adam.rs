//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![T::zero(); num_params],
            second_moment: vec![T::zero(); num_params],
            step: 0,
            lr,
        }
    }
}

pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], state: &mut OptimizerState<T>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            format!("{} parameters", params.len()),
            format!("{} gradients, {} moments", grads.len(), state.first_moment.len()),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(state.lr);
    let eps = T::lit(cfg.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        let mut p = vec![1.0, -2.0];
        let mut st = OptimizerState::new(2, 1e-3);
        adam_update(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_formula() {
        let cfg = AdamConfig::default();
        for g in [0.5, -3.0, 1e-9] {
            let mut p = vec![0.0];
            let mut st = OptimizerState::new(1, 1e-2);
            adam_update(&mut p, &[g], &mut st, &cfg).unwrap();
            // m_hat = g, v_hat = g^2 after bias correction.
            let expected = -1e-2 * g / (f64::abs(g) + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {}", p[0], expected);
        }
    }

    #[test]
    fn constant_gradient_gives_sign_step() {
        let mut p = vec![0.0, 0.0];
        let mut st = OptimizerState::new(2, 1e-3);
        let mut last = p.clone();
        for _ in 0..200 {
            adam_update(&mut p, &[4.0, -0.02], &mut st, &AdamConfig::default()).unwrap();
            let step: Vec<f64> = p.iter().zip(&last).map(|(a, b)| a - b).collect();
            assert!((step[0] + 1e-3).abs() < 1e-8);
            assert!((step[1] - 1e-3).abs() < 1e-8);
            last = p.clone();
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut st = OptimizerState::new(2, 1e-3);
        assert!(adam_update(&mut p, &[0.0; 3], &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let mut p = vec![0.25, 3.0];
        let mut st = OptimizerState::new(2, 0.0);
        for _ in 0..5 {
            adam_update(&mut p, &[1.0, -7.0], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![0.25, 3.0]);
    }
}
