//! Test-time training baseline: fresh low-rank factors tuned per class on
//! its most typical samples.

use serde::{Deserialize, Serialize};

use crate::backbone::{collect_adaptation_targets, Denoiser, ForwardCtx, NoiseSchedule, Segment, TargetKind};
use crate::composition::{LowRankUpdate, UpdateSet};
use crate::data::{NoisedBatch, SyntheticDataset};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Param, Scalar, SeededRng, Tape};

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub steps: usize,
    pub lr: f64,
    /// Same-class samples tuned on.
    pub neighbors: usize,
    /// Must match the composer's rank for a fair comparison.
    pub r: usize,
    pub targets: BTreeSet<TargetKind>,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            steps: 20,
            lr: 1e-3,
            neighbors: 16,
            r: 8,
            targets: [TargetKind::Q, TargetKind::V].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TttOutcome<T: Scalar> {
    pub updates: UpdateSet<T>,
    /// Backbone forward+backward passes spent tuning.
    pub backbone_passes: usize,
    pub losses: Vec<f64>,
}

/// The `k` samples of `class` closest (in pixel space) to the class mean.
pub fn select_neighbors(ds: &SyntheticDataset, class: usize, k: usize) -> Result<Vec<usize>> {
    let members = ds.indices_of_class(class);
    if members.is_empty() {
        return Err(Error::Data(format!("class {class} has no samples")));
    }
    let p = ds.side * ds.side;
    let mut mean = vec![0.0f64; p];
    for &i in &members {
        for (m, &x) in mean.iter_mut().zip(ds.image(i)) {
            *m += x as f64 / members.len() as f64;
        }
    }
    let mut scored: Vec<(f64, usize)> = members
        .iter()
        .map(|&i| (ds.image(i).iter().zip(&mean).map(|(&x, m)| (x as f64 - m).powi(2)).sum(), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Tunes `(A, B)` for `class` with `steps` AdamW updates of the denoising
/// loss; the backbone is untouched. `A` starts Gaussian and `B` at zero, so
/// zero steps return an exactly-zero update.
pub fn ttt_adapt<T: Scalar>(
    net: &Denoiser<T>,
    ds: &SyntheticDataset,
    class: usize,
    cfg: &TttConfig,
    rng: &mut SeededRng,
) -> Result<TttOutcome<T>> {
    if cfg.neighbors == 0 || cfg.r == 0 {
        return Err(Error::Config("ttt neighbors and rank must be positive".into()));
    }
    let targets = collect_adaptation_targets(&net.config, &cfg.targets)?;
    let d = net.config.d;
    let mut params: Vec<Param<T>> = Vec::with_capacity(2 * targets.len());
    for t in &targets {
        params.push(Param::new(format!("ttt.{t}.a"), rng.randn(&[d, cfg.r], 1.0 / (d as f64).sqrt())));
        params.push(Param::new(format!("ttt.{t}.b"), crate::numerics::Tensor::zeros(&[cfg.r, d])));
    }
    let chosen = select_neighbors(ds, class, cfg.neighbors)?;
    let schedule = NoiseSchedule::cosine(net.config.timesteps);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = NoisedBatch::draw(ds, &chosen, net, &schedule, rng)?;
        let tape = Tape::new();
        let updates = bind(&tape, &targets, &params)?;
        let segs = [Segment {
            start: 0,
            len: batch.len(),
            updates: &updates,
        }];
        let out = net.forward(&tape, &batch.x_t, &batch.t, &batch.classes, &ForwardCtx::train(&segs))?;
        let loss = Denoiser::diffusion_loss(&tape, &out.eps, &batch.eps, batch.len())?;
        let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("ttt loss at step {step} (partial losses {losses:?})"),
                index: step,
            });
        }
        losses.push(value);
        let grads = tape.backward(&loss)?;
        opt.step(&mut params, &grads)?;
    }
    Ok(TttOutcome {
        updates: bind(&Tape::inference(), &targets, &params)?.detach(),
        backbone_passes: cfg.steps,
        losses,
    })
}

fn bind<T: Scalar>(tape: &Tape<T>, targets: &[crate::backbone::Target], params: &[Param<T>]) -> Result<UpdateSet<T>> {
    let entries = targets
        .iter()
        .zip(params.chunks(2))
        .map(|(&t, ab)| Ok((t, LowRankUpdate::new(tape.param(&ab[0]), tape.param(&ab[1]))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(UpdateSet::new(entries))
}
