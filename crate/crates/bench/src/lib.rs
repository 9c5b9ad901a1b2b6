//! Fixtures shared by the criterion benches: an untrained default-size
//! backbone and composer, frozen the way the benchmark harness expects.

use composer_lab::backbone::{Denoiser, DenoiserConfig};
use composer_lab::composer::{Composer, ComposerConfig};
use composer_lab::composition::LowRankUpdate;
use composer_lab::{Module, Result, SeededRng, Tensor};

pub struct Fixture {
    pub net: Denoiser<f32>,
    pub composer: Composer<f32>,
}

pub fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = DenoiserConfig::default();
    let rng = SeededRng::new(seed);
    let mut net = Denoiser::<f32>::new(cfg, &rng)?;
    net.set_requires_grad(false);
    let composer = Composer::<f32>::new(ComposerConfig::default(), &cfg, &rng.fork("composer"))?;
    Ok(Fixture { net, composer })
}

/// `W [d, d]`, a rank-`r` update and `n` input rows.
pub fn linear_case(d: usize, r: usize, n: usize, seed: u64) -> Result<(Tensor<f32>, LowRankUpdate<f32>, Tensor<f32>)> {
    let mut rng = SeededRng::new(seed);
    let w = rng.randn(&[d, d], 1.0 / (d as f64).sqrt());
    let u = LowRankUpdate::from_tensors(rng.randn(&[d, r], 0.1), rng.randn(&[r, d], 0.1))?;
    let x = rng.randn(&[n, d], 1.0);
    Ok((w, u, x))
}
