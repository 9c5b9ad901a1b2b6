//! Small building blocks shared by the denoiser and the meta-generator.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Mask, Module, Param, Scalar, SeededRng, Tape, Tensor, Var};

/// `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn new(name: &str, inp: usize, out: usize, bias: bool, std: f64, rng: &mut SeededRng) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), rng.randn(&[out, inp], std)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out]))),
        }
    }

    /// Standard deviation `1/√in`.
    pub fn fan_in(name: &str, inp: usize, out: usize, bias: bool, rng: &mut SeededRng) -> Self {
        Self::new(name, inp, out, bias, 1.0 / (inp as f64).sqrt(), rng)
    }

    pub fn zeros(name: &str, inp: usize, out: usize, bias: bool) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[out, inp])),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out]))),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(&self.weight);
        let y = tape.matmul_nt(x, &w)?;
        match &self.bias {
            Some(b) => tape.add_bias(&y, &tape.param(b)),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.layer_norm(x, &tape.param(&self.gain), &tape.param(&self.bias), LN_EPS)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Scaled dot-product attention over `k` independent sequences of length
/// `seq` stacked as rows: `q, k, v` are `[k·seq, heads·dh]`, the result has the
/// same shape. `mask` is `[seq, seq]` and shared by all sequences and heads.
pub fn attention<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    seq: usize,
    heads: usize,
    mask: Option<&Arc<Mask>>,
) -> Result<Var<T>> {
    let dh = q.shape()[1] / heads;
    let qh = tape.split_heads(q, seq, heads)?;
    let kh = tape.split_heads(k, seq, heads)?;
    let vh = tape.split_heads(v, seq, heads)?;
    if !tape.is_recording() {
        // Nothing needs the probabilities afterwards, so only one
        // (sequence, head) score matrix is alive at a time.
        let groups = qh.shape()[0];
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let slice = |x: &Var<T>, g: usize| {
            Var::constant(Tensor::from_vec(&[seq, dh], x.value().data()[g * seq * dh..(g + 1) * seq * dh].to_vec()).expect("head slice"))
        };
        let mut out = Vec::with_capacity(groups * seq * dh);
        for g in 0..groups {
            let s = tape.scale(&tape.matmul_nt(&slice(&qh, g), &slice(&kh, g))?, scale)?;
            let p = tape.softmax_masked(&s, mask)?;
            out.extend_from_slice(tape.matmul(&p, &slice(&vh, g))?.value().data());
        }
        let ctx = Var::constant(Tensor::from_vec(&[groups, seq, dh], out)?);
        return tape.merge_heads(&ctx, seq, heads);
    }
    let scores = tape.scale(&tape.matmul_nt(&qh, &kh)?, T::lit(1.0 / (dh as f64).sqrt()))?;
    let probs = tape.softmax_masked(&scores, mask)?;
    let ctx = tape.matmul(&probs, &vh)?;
    tape.merge_heads(&ctx, seq, heads)
}
