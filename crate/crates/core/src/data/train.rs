//! Denoising objective, validation, backbone pretraining and composer
//! training.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{sample_batch, BatchMode, BatchSpec, SimilarityIndex, SyntheticDataset};
use crate::backbone::{patchify, Denoiser, ForwardCtx, NoiseSchedule, Segment};
use crate::composer::Composer;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Module, Scalar, SeededRng, Tape, Tensor, Var};

/// Noised inputs for a set of dataset samples, ordered by class so that the
/// samples sharing a prompt form one contiguous segment.
#[derive(Debug, Clone)]
pub struct NoisedBatch<T: Scalar> {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub t: Vec<usize>,
    /// Clean tokens `[B·P, patch²]`.
    pub x0: Tensor<T>,
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> NoisedBatch<T> {
    /// Timesteps uniform on `[1, T]`, standard normal noise.
    pub fn draw(
        ds: &SyntheticDataset,
        indices: &[usize],
        net: &Denoiser<T>,
        schedule: &NoiseSchedule,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut indices = indices.to_vec();
        indices.sort_by_key(|&i| ds.labels[i]);
        let cfg = &net.config;
        let x0 = patchify(&ds.gather(&indices).cast::<T>(), cfg)?;
        let p = cfg.tokens() * cfg.patch_dim();
        let t: Vec<usize> = indices.iter().map(|_| rng.index(1, cfg.timesteps + 1)).collect();
        let eps: Tensor<T> = rng.randn(x0.shape(), 1.0);
        let mut xt = Vec::with_capacity(x0.numel());
        for (n, &tn) in t.iter().enumerate() {
            let g = schedule.gamma(tn)?;
            let (a, b) = (T::lit(g.sqrt()), T::lit((1.0 - g).sqrt()));
            let range = n * p..(n + 1) * p;
            xt.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&x, &e)| a * x + b * e));
        }
        Ok(NoisedBatch {
            classes: indices.iter().map(|&i| ds.labels[i]).collect(),
            indices,
            t,
            x_t: Tensor::from_vec(x0.shape(), xt)?,
            x0,
            eps,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Distinct classes in order, with the `(start, len)` run of each.
    pub fn class_runs(&self) -> Vec<(usize, usize, usize)> {
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for (i, &c) in self.classes.iter().enumerate() {
            match runs.last_mut() {
                Some((rc, _, len)) if *rc == c => *len += 1,
                _ => runs.push((c, i, 1)),
            }
        }
        runs
    }
}

/// Mean per-sample `‖ε − ε̂‖²` with each sample denoised under the update
/// generated from its own prompt.
pub fn composer_loss<T: Scalar>(
    tape: &Tape<T>,
    net: &Denoiser<T>,
    composer: &Composer<T>,
    batch: &NoisedBatch<T>,
) -> Result<Var<T>> {
    let runs = batch.class_runs();
    let classes: Vec<usize> = runs.iter().map(|r| r.0).collect();
    let sets = composer.generate(tape, net, &classes)?;
    let segs: Vec<Segment<'_, T>> = runs
        .iter()
        .zip(&sets)
        .map(|(&(_, start, len), updates)| Segment { start, len, updates })
        .collect();
    let out = net.forward(tape, &batch.x_t, &batch.t, &batch.classes, &ForwardCtx::train(&segs))?;
    Denoiser::diffusion_loss(tape, &out.eps, &batch.eps, batch.len())
}

fn static_loss<T: Scalar>(tape: &Tape<T>, net: &Denoiser<T>, batch: &NoisedBatch<T>) -> Result<Var<T>> {
    let out = net.forward(tape, &batch.x_t, &batch.t, &batch.classes, &ForwardCtx::default())?;
    Denoiser::diffusion_loss(tape, &out.eps, &batch.eps, batch.len())
}

/// Fixed validation batches: every validation sample once, with noise drawn
/// from `seed`, grouped by class in chunks of at most 64.
pub fn validation_batches<T: Scalar>(
    val: &SyntheticDataset,
    net: &Denoiser<T>,
    seed: u64,
) -> Result<Vec<NoisedBatch<T>>> {
    let schedule = NoiseSchedule::cosine(net.config.timesteps);
    let mut rng = SeededRng::new(seed).fork("eval.noise");
    let mut order: Vec<usize> = (0..val.len()).collect();
    order.sort_by_key(|&i| (val.labels[i], i));
    order
        .chunks(64)
        .map(|chunk| NoisedBatch::draw(val, chunk, net, &schedule, &mut rng))
        .collect()
}

/// Mean validation denoising loss, with or without the composer.
pub fn evaluate_val_loss<T: Scalar>(
    net: &Denoiser<T>,
    composer: Option<&Composer<T>>,
    batches: &[NoisedBatch<T>],
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let tape = Tape::inference();
        let loss = match composer {
            Some(c) => composer_loss(&tape, net, c, b)?,
            None => static_loss(&tape, net, b)?,
        };
        total += loss.value().item().to_f64().unwrap_or(f64::NAN) * b.len() as f64;
        n += b.len();
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 16,
            batch: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Validation loss before training, then after each epoch.
    pub val_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Trains every backbone parameter with the plain denoising loss, then
/// freezes them.
pub fn pretrain_backbone(
    net: &mut Denoiser<f32>,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<PretrainReport> {
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretraining needs positive epochs, batch and lr".into()));
    }
    net.set_requires_grad(true);
    let schedule = NoiseSchedule::cosine(net.config.timesteps);
    let val_batches = validation_batches(val, net, cfg.seed)?;
    let mut rng = SeededRng::new(cfg.seed).fork("pretrain.batches");
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let steps = train.len().div_ceil(cfg.batch);
    let mut report = PretrainReport {
        val_loss: vec![evaluate_val_loss(net, None, &val_batches)?],
        train_loss: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            // cosine decay to 10% over the run
            let progress = ((epoch - 1) * steps + step) as f64 / (cfg.epochs * steps) as f64;
            opt.set_lr(cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos())));
            let batch = NoisedBatch::draw(train, chunk, net, &schedule, &mut rng)?;
            let tape = Tape::new();
            let loss = static_loss(&tape, net, &batch)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("pretraining loss at epoch {epoch} step {step}"),
                    index: 0,
                });
            }
            sum += value;
            let grads = tape.backward(&loss)?;
            opt.step(net, &grads)?;
        }
        let val_loss = evaluate_val_loss(net, None, &val_batches)?;
        let train_loss = sum / steps as f64;
        info!("pretrain epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        on_epoch(epoch, train_loss, val_loss);
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
    }
    net.set_requires_grad(false);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub alpha: f64,
    pub pipeline: BatchMode,
    pub seed: u64,
    /// Cap on optimizer steps per epoch; `None` means one pass over the data.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            lr: 1e-4,
            weight_decay: 0.05,
            batch: 16,
            alpha: 0.75,
            pipeline: BatchMode::ContextClass,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        self.spec().validate()
    }

    pub fn spec(&self) -> BatchSpec {
        BatchSpec {
            alpha: self.alpha,
            b: self.batch,
            mode: self.pipeline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Frozen backbone alone on the validation batches.
    pub static_val: f64,
    /// Backbone plus the untrained composer.
    pub initial_val: f64,
    pub epochs: Vec<EpochStat>,
    pub backbone_checksum: u64,
}

impl TrainReport {
    pub fn final_val(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val, |e| e.val_loss)
    }
}

/// Generic composer optimization loop shared by the diffusion and
/// distillation objectives. `loss` maps a batch of dataset indices to a
/// scalar on the given tape; `validate` scores the current composer.
pub(crate) fn fit_composer<T: Scalar>(
    composer: &mut Composer<T>,
    frozen: &[&dyn Fn() -> u64],
    train: &SyntheticDataset,
    index: Option<&SimilarityIndex>,
    cfg: &TrainConfig,
    loss: impl Fn(&Tape<T>, &Composer<T>, &[usize], &mut SeededRng) -> Result<Var<T>>,
    validate: impl Fn(&Composer<T>) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochStat),
) -> Result<Vec<EpochStat>> {
    cfg.validate()?;
    let before: Vec<u64> = frozen.iter().map(|f| f()).collect();
    let spec = cfg.spec();
    let mut rng = SeededRng::new(cfg.seed).fork("composer.batches");
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| train.len().div_ceil(cfg.batch));
    let index = match (spec.mode, index) {
        (BatchMode::ContextSimilarity, None) => return Err(Error::Input("context_similarity needs a similarity index".into())),
        (_, i) => i,
    };
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for step in 0..steps {
            let anchor = spec.mode.needs_anchor().then(|| rng.index(0, train.len()));
            let batch = sample_batch(train, &spec, anchor, index, &mut rng)?;
            let tape = Tape::new();
            let l = loss(&tape, composer, &batch.indices, &mut rng)?;
            let value = l.value().item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("composer loss at epoch {epoch} step {step}"),
                    index: 0,
                });
            }
            sum += value;
            let grads = tape.backward(&l)?;
            opt.step(composer, &grads)?;
            debug!("epoch {epoch} step {step} loss {value:.5}");
        }
        for (f, &b) in frozen.iter().zip(&before) {
            if f() != b {
                return Err(Error::Integrity(format!("frozen backbone changed during epoch {epoch}")));
            }
        }
        let stat = EpochStat {
            epoch,
            train_loss: sum / steps as f64,
            val_loss: validate(composer)?,
        };
        info!("composer epoch {epoch}: train {:.4} val {:.4}", stat.train_loss, stat.val_loss);
        on_epoch(&stat);
        stats.push(stat);
    }
    Ok(stats)
}

/// Trains the composer against the frozen `net` with the denoising loss.
pub fn train_composer<T: Scalar>(
    net: &Denoiser<T>,
    composer: &mut Composer<T>,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    index: Option<&SimilarityIndex>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStat),
) -> Result<TrainReport> {
    let mut trainable = false;
    net.visit(&mut |p| trainable |= p.requires_grad());
    if trainable {
        return Err(Error::State("backbone must be frozen before composer training".into()));
    }
    let schedule = NoiseSchedule::cosine(net.config.timesteps);
    let val_batches = validation_batches(val, net, cfg.seed)?;
    let static_val = evaluate_val_loss(net, None, &val_batches)?;
    let initial_val = evaluate_val_loss(net, Some(composer), &val_batches)?;
    let checksum = || net.checksum();
    let epochs = fit_composer(
        composer,
        &[&checksum],
        train,
        index,
        cfg,
        |tape, c, idx, rng| {
            let batch = NoisedBatch::draw(train, idx, net, &schedule, rng)?;
            composer_loss(tape, net, c, &batch)
        },
        |c| evaluate_val_loss(net, Some(c), &val_batches),
        on_epoch,
    )?;
    Ok(TrainReport {
        static_val,
        initial_val,
        epochs,
        backbone_checksum: net.checksum(),
    })
}
