//! Estimators of the anechoic speech PSD that weights the RLS-WPE update.
//!
//! Estimators return raw values; the `psd_floor` is applied by the WPE step
//! so the estimators stay exact.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `(1/D) sum_d |x_{f,d}|` for a bin-major `F * D` frame.
pub fn channel_average_magnitude<T: Real>(frame: &[Complex<T>], num_channels: usize) -> Vec<T> {
    let inv_d = T::one() / T::from_usize_lossy(num_channels);
    frame
        .chunks_exact(num_channels)
        .map(|bin| bin.iter().map(|z| z.norm()).sum::<T>() * inv_d)
        .collect()
}

/// `lambda_t = beta * lambda_{t-1} + (1 - beta) * |x_bar_t|^2`.
pub fn smoothed_psd<T: Real>(prev: &[T], avg_mag: &[T], beta: T) -> Vec<T> {
    prev.iter()
        .zip(avg_mag)
        .map(|(&l, &m)| beta * l + (T::one() - beta) * m * m)
        .collect()
}

/// PSD from the known target frame.
pub fn oracle_psd<T: Real>(target: &[Complex<T>], num_channels: usize) -> Vec<T> {
    channel_average_magnitude(target, num_channels)
        .into_iter()
        .map(|m| m * m)
        .collect()
}

/// `lambda = (M * |x_bar|)^2`.
pub fn mask_to_psd<T: Real>(mask: &[T], avg_mag: &[T]) -> Vec<T> {
    mask.iter()
        .zip(avg_mag)
        .map(|(&m, &x)| {
            let v = m * x;
            v * v
        })
        .collect()
}

/// Recursive periodogram smoothing with carried state.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedPsd<T> {
    beta: T,
    lambda: Vec<T>,
}

impl<T: Real> SmoothedPsd<T> {
    pub fn new(num_bins: usize, beta: T) -> Result<Self> {
        if !(beta > T::zero() && beta < T::one()) {
            return Err(Error::InvalidConfig(format!("smoothing {beta} outside (0, 1)")));
        }
        Ok(Self {
            beta,
            lambda: vec![T::zero(); num_bins],
        })
    }

    pub fn update(&mut self, avg_mag: &[T]) -> &[T] {
        self.lambda = smoothed_psd(&self.lambda, avg_mag, self.beta);
        &self.lambda
    }

    pub fn current(&self) -> &[T] {
        &self.lambda
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsdConfig {
    /// Smoothing constant of the vanilla estimator.
    pub smoothing: f64,
}

impl Default for PsdConfig {
    fn default() -> Self {
        Self { smoothing: 0.85 }
    }
}
