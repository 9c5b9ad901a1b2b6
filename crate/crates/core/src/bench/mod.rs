//! Static / test-time-training / composer comparison harness.
//!
//! Every generation runs under its own [`AllocTracker`] so peak bytes are
//! attributable to one strategy, and is split into an adapt phase (nothing,
//! TTT tuning, or composer generation) and a sample phase (merge plus the
//! S-step loop). Sampling noise for a `(seed, class)` pair is shared across
//! strategies so score differences come from the adaptation alone.

mod ablation;
mod frechet;
mod ttt;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use ablation::{default_grid, run_ablation, AblationAxis, AblationBase, AblationRow};
pub use frechet::{frechet_features, frechet_from_features, toy_frechet, COV_RIDGE, MIN_SAMPLES};
pub use ttt::{select_neighbors, ttt_adapt, TttConfig, TttOutcome};

use crate::backbone::{Denoiser, ForwardCtx, Instruments, Segment};
use crate::composer::Composer;
use crate::composition::UpdateSet;
use crate::data::{evaluate_val_loss, NoisedBatch, SyntheticDataset};
use crate::error::{Error, Result};
use crate::numerics::{AllocTracker, Scalar, SeededRng, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    Static,
    Ttt(TttConfig),
    Composer,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::Ttt(_) => "ttt",
            Strategy::Composer => "composer",
        }
    }
}

/// Shared inputs of every strategy.
#[derive(Clone, Copy)]
pub struct BenchEnv<'a, T: Scalar> {
    pub net: &'a Denoiser<T>,
    pub composer: Option<&'a Composer<T>>,
    /// Pool TTT tunes on.
    pub train: &'a SyntheticDataset,
    /// Held-out real images the Fréchet score compares against.
    pub real: &'a SyntheticDataset,
    pub val_batches: &'a [NoisedBatch<T>],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub secs: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub adapt: PhaseCost,
    pub sample: PhaseCost,
    pub merges: usize,
    pub denoiser_calls: usize,
    pub inference_path_applications: usize,
    /// Backbone forward+backward passes spent adapting.
    pub backbone_passes: usize,
}

impl Overhead {
    pub fn total_secs(&self) -> f64 {
        self.adapt.secs + self.sample.secs
    }

    pub fn peak_bytes(&self) -> usize {
        self.adapt.peak_bytes.max(self.sample.peak_bytes)
    }
}

pub struct Generation<T: Scalar> {
    pub images: Tensor<T>,
    pub updates: Option<UpdateSet<T>>,
    pub overhead: Overhead,
}

/// Adapts to `class` with `strategy` and draws `count` images in `steps`
/// steps, timing and metering both phases.
pub fn measure_overhead<T: Scalar>(
    env: &BenchEnv<'_, T>,
    strategy: &Strategy,
    class: usize,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Generation<T>> {
    let tracker = AllocTracker::new();
    let instruments = Instruments::default();
    tracker.scope(|| {
        let mut overhead = Overhead::default();
        tracker.reset_peak();
        let start = Instant::now();
        let updates = match strategy {
            Strategy::Static => None,
            Strategy::Composer => {
                let composer = env
                    .composer
                    .ok_or_else(|| Error::State("composer strategy needs a trained composer".into()))?;
                let sets = composer.generate(&Tape::inference(), env.net, &[class])?;
                sets.into_iter().next().map(|s| s.detach())
            }
            Strategy::Ttt(cfg) => {
                let mut rng = SeededRng::new(seed).fork_indexed("bench.ttt", class as u64);
                let out = ttt_adapt(env.net, env.train, class, cfg, &mut rng)?;
                overhead.backbone_passes = out.backbone_passes;
                Some(out.updates)
            }
        };
        overhead.adapt = PhaseCost {
            secs: start.elapsed().as_secs_f64(),
            peak_bytes: tracker.peak_bytes(),
        };
        tracker.reset_peak();
        let start = Instant::now();
        let mut rng = SeededRng::new(seed).fork_indexed("bench.sample", class as u64);
        let out = env
            .net
            .sample_loop(class, count, steps, updates.as_ref(), None, &mut rng, Some(&instruments))?;
        drop(out.merged);
        overhead.sample = PhaseCost {
            secs: start.elapsed().as_secs_f64(),
            peak_bytes: tracker.peak_bytes(),
        };
        overhead.merges = instruments.merges();
        overhead.denoiser_calls = instruments.denoiser_calls();
        overhead.inference_path_applications = instruments.inference_path_applications();
        Ok(Generation {
            images: out.images,
            updates,
            overhead,
        })
    })
}

/// Validation denoising loss with a fixed update set per class (classes
/// without one use the plain backbone).
pub fn val_loss_with_updates<T: Scalar>(
    net: &Denoiser<T>,
    sets: &BTreeMap<usize, UpdateSet<T>>,
    batches: &[NoisedBatch<T>],
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    let empty = UpdateSet::new(Vec::new());
    for b in batches {
        let tape = Tape::inference();
        let runs = b.class_runs();
        let segs: Vec<Segment<'_, T>> = runs
            .iter()
            .map(|&(c, start, len)| Segment {
                start,
                len,
                updates: sets.get(&c).unwrap_or(&empty),
            })
            .collect();
        let out = net.forward(&tape, &b.x_t, &b.t, &b.classes, &ForwardCtx::train(&segs))?;
        let loss = Denoiser::diffusion_loss(&tape, &out.eps, &b.eps, b.len())?;
        total += loss.value().item().to_f64().unwrap_or(f64::NAN) * b.len() as f64;
        n += b.len();
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    /// Sampling steps S.
    pub steps: usize,
    pub samples_per_class: usize,
    pub seeds: Vec<u64>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            steps: 50,
            samples_per_class: 10,
            seeds: vec![0, 1, 2],
        }
    }
}

/// One strategy under one seed, summed over all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: String,
    pub seed: u64,
    pub frechet: f64,
    pub val_loss: f64,
    pub adapt_secs: f64,
    pub sample_secs: f64,
    pub total_secs: f64,
    pub peak_bytes: usize,
    pub merges: usize,
    pub inference_path_applications: usize,
    pub backbone_passes: usize,
    /// Set when the strategy failed; the numeric fields are then NaN/zero.
    pub error: Option<String>,
}

/// Medians over the seeds that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub frechet: f64,
    pub val_loss: f64,
    pub adapt_secs: f64,
    pub total_secs: f64,
    pub peak_bytes: f64,
    pub merges_per_generation: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: ComparisonConfig,
    pub runs: Vec<StrategyRun>,
    pub summary: Vec<StrategySummary>,
}

impl BenchReport {
    pub fn summary_of(&self, strategy: &str) -> Option<&StrategySummary> {
        self.summary.iter().find(|s| s.strategy == strategy)
    }
}

/// Median of finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_one<T: Scalar>(env: &BenchEnv<'_, T>, strategy: &Strategy, cfg: &ComparisonConfig, seed: u64) -> Result<StrategyRun> {
    let classes = env.net.config.classes;
    let mut images: Vec<T> = Vec::new();
    let mut sets = BTreeMap::new();
    let mut run = StrategyRun {
        strategy: strategy.name().into(),
        seed,
        frechet: f64::NAN,
        val_loss: f64::NAN,
        adapt_secs: 0.0,
        sample_secs: 0.0,
        total_secs: 0.0,
        peak_bytes: 0,
        merges: 0,
        inference_path_applications: 0,
        backbone_passes: 0,
        error: None,
    };
    for class in 0..classes {
        let g = measure_overhead(env, strategy, class, cfg.samples_per_class, cfg.steps, seed)?;
        let o = &g.overhead;
        run.adapt_secs += o.adapt.secs;
        run.sample_secs += o.sample.secs;
        run.peak_bytes = run.peak_bytes.max(o.peak_bytes());
        run.merges += o.merges;
        run.inference_path_applications += o.inference_path_applications;
        run.backbone_passes += o.backbone_passes;
        images.extend_from_slice(g.images.data());
        if let Some(u) = g.updates {
            sets.insert(class, u);
        }
    }
    run.total_secs = run.adapt_secs + run.sample_secs;
    let side = env.net.config.image_size;
    let generated = Tensor::from_vec(&[classes * cfg.samples_per_class, side, side], images)?;
    run.frechet = toy_frechet(&env.real.images, &generated)?;
    run.val_loss = match strategy {
        Strategy::Static => evaluate_val_loss(env.net, None, env.val_batches)?,
        Strategy::Composer => evaluate_val_loss(env.net, env.composer, env.val_batches)?,
        Strategy::Ttt(_) => val_loss_with_updates(env.net, &sets, env.val_batches)?,
    };
    Ok(run)
}

/// Runs every strategy under every seed. A failing strategy is reported
/// with its error and does not stop the others.
pub fn run_comparison<T: Scalar>(env: &BenchEnv<'_, T>, strategies: &[Strategy], cfg: &ComparisonConfig) -> BenchReport {
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for strategy in strategies {
        let mut mine = Vec::new();
        for &seed in &cfg.seeds {
            let outcome = catch_unwind(AssertUnwindSafe(|| run_one(env, strategy, cfg, seed)))
                .unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panic".into());
                    Err(Error::State(format!("strategy panicked: {msg}")))
                });
            let run = outcome.unwrap_or_else(|e| {
                warn!("{} seed {seed} failed: {e}", strategy.name());
                StrategyRun {
                    strategy: strategy.name().into(),
                    seed,
                    frechet: f64::NAN,
                    val_loss: f64::NAN,
                    adapt_secs: f64::NAN,
                    sample_secs: f64::NAN,
                    total_secs: f64::NAN,
                    peak_bytes: 0,
                    merges: 0,
                    inference_path_applications: 0,
                    backbone_passes: 0,
                    error: Some(e.to_string()),
                }
            });
            info!(
                "{} seed {seed}: frechet {:.5} val {:.4} time {:.3}s peak {}B",
                run.strategy, run.frechet, run.val_loss, run.total_secs, run.peak_bytes
            );
            mine.push(run);
        }
        let ok: Vec<&StrategyRun> = mine.iter().filter(|r| r.error.is_none()).collect();
        let col = |f: &dyn Fn(&StrategyRun) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let gens = env.net.config.classes as f64;
        summary.push(StrategySummary {
            strategy: strategy.name().into(),
            frechet: col(&|r| r.frechet),
            val_loss: col(&|r| r.val_loss),
            adapt_secs: col(&|r| r.adapt_secs),
            total_secs: col(&|r| r.total_secs),
            peak_bytes: col(&|r| r.peak_bytes as f64),
            merges_per_generation: col(&|r| r.merges as f64 / gens),
            failed: ok.len() < mine.len(),
        });
        runs.extend(mine);
    }
    BenchReport {
        config: cfg.clone(),
        runs,
        summary,
    }
}
