//! Cosine noise schedule.
//!
//! `γ_t = f(t)/f(0)` with `f(t) = cos²(((t/T) + s)/(1 + s) · π/2)`, `s = 0.008`,
//! clamped to `[1e-5, 1 − 1e-5]` so every value lies strictly inside (0, 1).

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const OFFSET: f64 = 0.008;
const CLAMP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `gamma[t-1]` is γ_t.
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize) -> Self {
        let f = |t: f64| {
            let a = ((t / timesteps as f64) + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let f0 = f(0.0);
        let gamma = (1..=timesteps)
            .map(|t| (f(t as f64) / f0).clamp(CLAMP, 1.0 - CLAMP))
            .collect();
        NoiseSchedule { gamma }
    }

    pub fn timesteps(&self) -> usize {
        self.gamma.len()
    }

    /// γ_t for `t ∈ [1, T]`.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.gamma.len() {
            return Err(Error::Schedule {
                t,
                max: self.gamma.len(),
            });
        }
        Ok(self.gamma[t - 1])
    }

    /// `√γ_t·x + √(1−γ_t)·ε`.
    pub fn noising<T: Scalar>(&self, x: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.gamma(t)?;
        noising_with(x, g, eps)
    }
}

pub(crate) fn noising_with<T: Scalar>(x: &Tensor<T>, gamma: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b) = (T::lit(gamma.sqrt()), T::lit((1.0 - gamma).sqrt()));
    x.zip_map(eps, |xi, ei| a * xi + b * ei)
}
