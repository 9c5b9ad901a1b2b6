//! AdamW with decoupled weight decay.
//!
//! For each trainable parameter `p` with gradient `g`, at step `t`:
//!
//! ```text
//! m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
//! m̂ = m / (1−β₁ᵗ)            v̂ = v / (1−β₂ᵗ)
//! p ← p·(1 − lr·wd) − lr·m̂ / (√v̂ + eps)
//! ```
//!
//! The decay multiplies the parameter and never enters the moments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::Module;
use super::scalar::Scalar;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    shape: Vec<usize>,
}

pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Shape of the moment buffers kept for `name`, if any.
    pub fn moment_shape(&self, name: &str) -> Option<&[usize]> {
        self.moments.get(name).map(|m| m.shape.as_slice())
    }

    /// One update of every trainable parameter of `module`. Gradients missing
    /// from `grads` count as zero. A non-finite gradient aborts before any
    /// parameter changes.
    pub fn step(&mut self, module: &mut impl Module<T>, grads: &Gradients<T>) -> Result<()> {
        let mut pending: Vec<(String, Option<Tensor<T>>)> = Vec::new();
        let mut bad = None;
        module.visit(&mut |p| {
            if !p.requires_grad() || bad.is_some() {
                return;
            }
            let g = grads.param(p.name());
            if let Some(g) = &g {
                if g.shape() != p.shape() {
                    bad = Some(Error::shape("adamw", p.shape(), g.shape()));
                    return;
                }
                if !g.is_finite() {
                    bad = Some(Error::TrainingAbort {
                        param: p.name().to_string(),
                    });
                    return;
                }
            }
            pending.push((p.name().to_string(), g));
        });
        if let Some(e) = bad {
            return Err(e);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let mut grads_by_name: HashMap<String, Option<Tensor<T>>> = pending.into_iter().collect();
        let moments = &mut self.moments;
        module.visit_mut(&mut |p| {
            let Some(g) = grads_by_name.remove(p.name()) else {
                return;
            };
            let n = p.value().numel();
            let st = moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                shape: p.shape().to_vec(),
            });
            let mut w = p.value().to_vec();
            for i in 0..n {
                let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                w[i] = w[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.shape().to_vec();
            p.set_value(Tensor::from_vec_unchecked(&shape, w))
                .expect("shape preserved");
        });
        Ok(())
    }
}
