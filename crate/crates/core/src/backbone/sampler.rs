//! Patch layout conversion and ancestral sampling.
//!
//! For `S` sampling steps the visited timesteps are `τᵢ = round(i·T/S)`,
//! `i = S..1`. From `τᵢ` to `τᵢ₋₁` (with `γ` at `τ₀ = 0` equal to 1):
//!
//! ```text
//! x̂₀ = clip((x − √(1−γ)·ε̂) / √γ, −1, 1)
//! σ² = (1−γ')/(1−γ) · (1 − γ/γ')
//! x ← √γ'·x̂₀ + √(1−γ'−σ²)·ε̂ + σ·z
//! ```
//!
//! and the final step returns `x̂₀`. Update sets are merged into dense
//! weights once, before the first step.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Denoiser, DenoiserConfig, ForwardCtx, NoiseSchedule};
use crate::backbone::denoiser::ActQuant;
use crate::composition::{merge_all, MergeCounter, MergedWeights, UpdateSet};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tape, Tensor};

/// Images `[n, side, side]` → tokens `[n·tokens, patch²]`; tokens are patches
/// in row-major order, pixels row-major inside each patch.
pub fn patchify<T: Scalar>(images: &Tensor<T>, cfg: &DenoiserConfig) -> Result<Tensor<T>> {
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let n = images.numel() / (s * s);
    if images.numel() != n * s * s || n == 0 {
        return Err(Error::shape("patchify", images.shape(), &[s, s]));
    }
    let side = s / p;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for img in 0..n {
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let row = img * s * s + (py * p + y) * s + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::from_vec(&[n * side * side, p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, cfg: &DenoiserConfig) -> Result<Tensor<T>> {
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let n = tokens.numel() / (s * s);
    if tokens.numel() != n * s * s || n == 0 {
        return Err(Error::shape("unpatchify", tokens.shape(), &[s, s]));
    }
    let side = s / p;
    let src = tokens.data();
    let mut out = vec![T::zero(); tokens.numel()];
    let mut i = 0;
    for img in 0..n {
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let row = img * s * s + (py * p + y) * s + px * p;
                    out[row..row + p].copy_from_slice(&src[i..i + p]);
                    i += p;
                }
            }
        }
    }
    Tensor::from_vec(&[n, s, s], out)
}

/// Counters for the merge-once contract.
#[derive(Debug, Default)]
pub struct Instruments {
    pub merge: MergeCounter,
    denoiser_calls: AtomicUsize,
}

impl Instruments {
    pub fn merges(&self) -> usize {
        self.merge.merges()
    }

    pub fn denoiser_calls(&self) -> usize {
        self.denoiser_calls.load(Ordering::Relaxed)
    }

    /// Denoiser calls that used merged weights.
    pub fn inference_path_applications(&self) -> usize {
        self.merge.applications()
    }
}

pub struct SampleOutput<T: Scalar> {
    /// `[count, side, side]`.
    pub images: Tensor<T>,
    pub merged: Option<MergedWeights<T>>,
}

fn timestep_sequence(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect()
}

impl<T: Scalar> Denoiser<T> {
    /// Draws `count` images of `class` in `steps` ancestral steps. When
    /// `updates` are supplied they are merged exactly once before the loop.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loop(
        &self,
        class: usize,
        count: usize,
        steps: usize,
        updates: Option<&UpdateSet<T>>,
        quant: Option<&ActQuant<T>>,
        rng: &mut SeededRng,
        instruments: Option<&Instruments>,
    ) -> Result<SampleOutput<T>> {
        let cfg = self.config;
        if steps == 0 || steps > cfg.timesteps {
            return Err(Error::Config(format!(
                "bench.steps {steps} outside [1, {}]",
                cfg.timesteps
            )));
        }
        if count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        let merged = match updates {
            Some(u) => Some(merge_all(
                |t| Ok(self.target_weight(t)?.value().clone()),
                u,
                instruments.map(|i| &i.merge),
                format!("class {class}"),
            )?),
            None => None,
        };
        let schedule = NoiseSchedule::cosine(cfg.timesteps);
        let taus = timestep_sequence(cfg.timesteps, steps);
        let shape = [count * cfg.tokens(), cfg.patch_dim()];
        let mut x: Tensor<T> = rng.randn(&shape, 1.0);
        let classes = vec![class; count];
        let tape = Tape::inference();
        let ctx = ForwardCtx {
            adapt: match &merged {
                Some(m) => super::Adaptation::Merged(m),
                None => super::Adaptation::None,
            },
            quant,
            capture: false,
        };
        for i in (0..steps).rev() {
            let t = taus[i];
            let g = schedule.gamma(t)?;
            let g_prev = if i == 0 { 1.0 } else { schedule.gamma(taus[i - 1])? };
            let eps_hat = self.forward(&tape, &x, &vec![t; count], &classes, &ctx)?.eps.into_value();
            if let Some(ins) = instruments {
                ins.denoiser_calls.fetch_add(1, Ordering::Relaxed);
                if merged.is_some() {
                    ins.merge.count_application();
                }
            }
            let (sg, s1g) = (T::lit(g.sqrt()), T::lit((1.0 - g).sqrt()));
            let x0 = x.zip_map(&eps_hat, |xi, ei| ((xi - s1g * ei) / sg).max(-T::one()).min(T::one()))?;
            if i == 0 {
                x = x0;
                break;
            }
            let var = (1.0 - g_prev) / (1.0 - g) * (1.0 - g / g_prev);
            let sigma = var.max(0.0).sqrt();
            let dir = (1.0 - g_prev - var).max(0.0).sqrt();
            let z: Tensor<T> = rng.randn(&shape, 1.0);
            let (a, b, c) = (T::lit(g_prev.sqrt()), T::lit(dir), T::lit(sigma));
            let mean = x0.zip_map(&eps_hat, |x0i, ei| a * x0i + b * ei)?;
            x = mean.zip_map(&z, |m, zi| m + c * zi)?;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: "sample_loop".into(),
                index: x.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
            });
        }
        Ok(SampleOutput {
            images: unpatchify(&x, &cfg)?,
            merged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{collect_adaptation_targets, TargetKind};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            d: 8,
            layers: 2,
            heads: 2,
            classes: 3,
            timesteps: 50,
        }
    }

    #[test]
    fn patch_round_trip() {
        let cfg = tiny();
        let img = Tensor::<f32>::from_fn(&[2, 8, 8], |i| i as f32);
        let tok = patchify(&img, &cfg).unwrap();
        assert_eq!(tok.shape(), &[8, 16]);
        // second patch of the first image starts at column 4 of row 0
        assert_eq!(tok.at(&[1, 0]), 4.0);
        assert_eq!(tok.at(&[1, 4]), 12.0);
        assert!(unpatchify(&tok, &cfg).unwrap().bit_eq(&img));
    }

    #[test]
    fn counters_and_determinism() {
        let cfg = tiny();
        let rng = SeededRng::new(8);
        let net = Denoiser::<f32>::new(cfg, &rng).unwrap();
        let targets = collect_adaptation_targets(&cfg, &TargetKind::parse_set("QV").unwrap()).unwrap();
        let ups = UpdateSet::zeros(&targets, 8, 2);
        for steps in [1, 10, 50] {
            let ins = Instruments::default();
            let mut r = SeededRng::new(1);
            let a = net.sample_loop(1, 2, steps, Some(&ups), None, &mut r, Some(&ins)).unwrap();
            assert_eq!(ins.merges(), 1);
            assert_eq!(ins.denoiser_calls(), steps);
            assert_eq!(ins.inference_path_applications(), steps);
            let mut r = SeededRng::new(1);
            let b = net.sample_loop(1, 2, steps, Some(&ups), None, &mut r, None).unwrap();
            assert!(a.images.bit_eq(&b.images));
        }
        let ins = Instruments::default();
        net.sample_loop(0, 1, 5, None, None, &mut SeededRng::new(2), Some(&ins)).unwrap();
        assert_eq!(ins.merges(), 0);
        assert!(net.sample_loop(0, 1, 51, None, None, &mut SeededRng::new(2), None).is_err());
    }

    #[test]
    fn timesteps_cover_the_schedule() {
        assert_eq!(timestep_sequence(100, 1), vec![100]);
        let s = timestep_sequence(100, 50);
        assert_eq!(s.len(), 50);
        assert_eq!(s[0], 2);
        assert_eq!(*s.last().unwrap(), 100);
    }
}
