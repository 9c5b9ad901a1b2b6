//! Simulated low-precision backbones and the quantization-aware composer.
//!
//! Weights of every block linear are snapped to a symmetric per-tensor grid
//! (`scale = max|W| / (2^{b−1} − 1)`); inputs of those linears are
//! fake-quantized to `a_bits` with scales calibrated once on a batch that is
//! disjoint from validation. The composer additionally emits one γ per
//! adapted target and the student computes `h_q = (W_q + AB)·fq(γ·x)`, so γ
//! rescales the layer — which is what a coarse weight grid that rounds most
//! of a tensor to zero needs.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::{ActQuant, Adaptation, Denoiser, ForwardCtx, NoiseSchedule, Segment};
use crate::composer::Composer;
use crate::composition::{apply_training_path, LowRankUpdate};
use crate::data::{fit_composer, EpochStat, NoisedBatch, SimilarityIndex, SyntheticDataset, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{fake_quantize_tensor, qmax, Module, Scalar, SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub enabled: bool,
    pub w_bits: u32,
    pub a_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            enabled: false,
            w_bits: 4,
            a_bits: 8,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8, 32].contains(&self.w_bits) {
            return Err(Error::Config(format!("quant.w_bits {} not in {{2, 4, 8}}", self.w_bits)));
        }
        if ![8, 32].contains(&self.a_bits) {
            return Err(Error::Config(format!("quant.a_bits {} not in {{8}}", self.a_bits)));
        }
        Ok(())
    }
}

/// `(W_q, scale)`. Width 32 is a passthrough; an all-zero tensor gets scale 1.
pub fn quantize_weight<T: Scalar>(w: &Tensor<T>, bits: u32) -> Result<(Tensor<T>, T)> {
    if bits >= 32 {
        return Ok((w.clone(), T::one()));
    }
    let m = w.max_abs();
    let scale = if m > T::zero() {
        m / qmax::<T>(bits)
    } else {
        warn!("all-zero tensor has a degenerate quantization scale; using 1");
        T::one()
    };
    Ok((fake_quantize_tensor(w, bits, scale, true)?, scale))
}

/// A copy of the backbone whose block linear weights lie on their grids.
#[derive(Debug, Clone)]
pub struct QuantizedBackbone<T: Scalar> {
    pub net: Denoiser<T>,
    pub weight_bits: u32,
    pub weight_scales: BTreeMap<String, T>,
    /// Activation quantizer; `None` runs activations (and γ) at full precision.
    pub act: Option<ActQuant<T>>,
}

impl<T: Scalar> QuantizedBackbone<T> {
    pub fn with_activations(mut self, act: ActQuant<T>) -> Self {
        self.act = Some(act);
        self
    }
}

pub fn quantize_backbone<T: Scalar>(net: &Denoiser<T>, cfg: &QuantConfig) -> Result<QuantizedBackbone<T>> {
    cfg.validate()?;
    let names = net.block_linear_names();
    let mut q = net.clone();
    let mut scales = BTreeMap::new();
    let mut err = None;
    q.visit_mut(&mut |p| {
        if err.is_some() || !names.iter().any(|n| n == p.name()) {
            return;
        }
        match quantize_weight(p.value(), cfg.w_bits).and_then(|(wq, s)| {
            p.set_value(wq)?;
            Ok(s)
        }) {
            Ok(s) => {
                scales.insert(p.name().to_string(), s);
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    q.set_requires_grad(false);
    Ok(QuantizedBackbone {
        net: q,
        weight_bits: cfg.w_bits,
        weight_scales: scales,
        act: None,
    })
}

/// Activation scales `max|x| / (2^{b−1} − 1)` per block linear, measured on
/// `batches` through the quantized weights.
pub fn calibrate_activations<T: Scalar>(
    qb: &QuantizedBackbone<T>,
    batches: &[NoisedBatch<T>],
    bits: u32,
) -> Result<ActQuant<T>> {
    let mut maxes: BTreeMap<String, T> = BTreeMap::new();
    for b in batches {
        let ctx = ForwardCtx {
            capture: true,
            ..Default::default()
        };
        let out = qb.net.forward(&Tape::inference(), &b.x_t, &b.t, &b.classes, &ctx)?;
        for (name, m) in out.input_absmax {
            let e = maxes.entry(name).or_insert(T::zero());
            *e = e.max(m);
        }
    }
    let q = qmax::<T>(bits.min(31));
    Ok(ActQuant {
        bits,
        scales: maxes
            .into_iter()
            .map(|(k, m)| (k, if m > T::zero() { m / q } else { T::one() }))
            .collect(),
    })
}

/// Calibration batch drawn from the training set.
pub fn calibration_batches<T: Scalar>(
    train: &SyntheticDataset,
    net: &Denoiser<T>,
    seed: u64,
    count: usize,
) -> Result<Vec<NoisedBatch<T>>> {
    let schedule = NoiseSchedule::cosine(net.config.timesteps);
    let mut rng = SeededRng::new(seed).fork("quant.calibration");
    let pool: Vec<usize> = (0..train.len()).collect();
    let idx = rng.choose_distinct(&pool, count.min(train.len()));
    Ok(vec![NoisedBatch::draw(train, &idx, net, &schedule, &mut rng)?])
}

/// One quantized linear with rows as instances:
/// `h_q = fq(γ·x)·W_qᵀ + (fq(γ·x)·Bᵀ)·Aᵀ`, with `γ = 1` when absent.
/// `round = false` replaces the quantizer by its straight-through surrogate.
#[allow(clippy::too_many_arguments)]
pub fn quant_forward<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    w_q: &Var<T>,
    update: Option<&LowRankUpdate<T>>,
    gamma: Option<&Var<T>>,
    bits: u32,
    scale: T,
    round: bool,
) -> Result<Var<T>> {
    let scaled = match gamma {
        Some(g) => {
            let gv = g.value().item();
            if !(gv > T::zero()) || !gv.is_finite() {
                return Err(Error::Contract(format!("γ must be positive and finite, got {gv}")));
            }
            tape.mul_scalar(x, g)?
        }
        None => x.clone(),
    };
    let xq = tape.fake_quantize(&scaled, bits, scale, round)?;
    apply_training_path(tape, &xq, w_q, update)
}

/// `‖h − h_q‖²` summed over elements, divided by `batch`.
pub fn kd_loss<T: Scalar>(tape: &Tape<T>, h_teacher: &Tensor<T>, h_q: &Var<T>, batch: usize) -> Result<Var<T>> {
    if h_teacher.shape() != h_q.shape() {
        return Err(Error::shape("kd_loss", h_teacher.shape(), h_q.shape()));
    }
    let d = tape.sub(h_q, &Var::constant(h_teacher.clone()))?;
    tape.scale(&tape.sum(&tape.square(&d)?)?, T::one() / T::lit(batch as f64))
}

/// Teacher outputs of the adapted targets for one batch.
fn teacher_taps<T: Scalar>(teacher: &Denoiser<T>, batch: &NoisedBatch<T>) -> Result<Vec<(crate::backbone::Target, Tensor<T>)>> {
    let ctx = ForwardCtx {
        capture: true,
        ..Default::default()
    };
    let out = teacher.forward(&Tape::inference(), &batch.x_t, &batch.t, &batch.classes, &ctx)?;
    Ok(out.taps.into_iter().map(|(t, v)| (t, v.into_value())).collect())
}

/// Distillation loss of the quantized student on `batch`, summed over the
/// composer's targets. With `composer = None` the student runs without
/// updates and with γ = 1.
pub fn student_kd_loss<T: Scalar>(
    tape: &Tape<T>,
    teacher: &Denoiser<T>,
    qb: &QuantizedBackbone<T>,
    composer: Option<&Composer<T>>,
    targets: &[crate::backbone::Target],
    batch: &NoisedBatch<T>,
) -> Result<Var<T>> {
    let reference = teacher_taps(teacher, batch)?;
    let runs = batch.class_runs();
    let sets = match composer {
        Some(c) => c.generate(tape, &qb.net, &runs.iter().map(|r| r.0).collect::<Vec<_>>())?,
        None => Vec::new(),
    };
    let segs: Vec<Segment<'_, T>> = runs
        .iter()
        .zip(&sets)
        .map(|(&(_, start, len), updates)| Segment { start, len, updates })
        .collect();
    let ctx = ForwardCtx {
        adapt: if composer.is_some() {
            Adaptation::Train(&segs)
        } else {
            Adaptation::None
        },
        quant: qb.act.as_ref(),
        capture: true,
    };
    let out = qb.net.forward(tape, &batch.x_t, &batch.t, &batch.classes, &ctx)?;
    let mut total: Option<Var<T>> = None;
    for ((ts, hq), (tt, h)) in out.taps.iter().zip(&reference) {
        debug_assert_eq!(ts, tt);
        if !targets.contains(ts) {
            continue;
        }
        let l = kd_loss(tape, h, hq, batch.len())?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Config("no adapted target produced a distillation tap".into()))
}

/// Mean validation distillation loss.
pub fn evaluate_kd<T: Scalar>(
    teacher: &Denoiser<T>,
    qb: &QuantizedBackbone<T>,
    composer: Option<&Composer<T>>,
    targets: &[crate::backbone::Target],
    batches: &[NoisedBatch<T>],
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let l = student_kd_loss(&Tape::inference(), teacher, qb, composer, targets, b)?;
        total += l.value().item().to_f64().unwrap_or(f64::NAN) * b.len() as f64;
        n += b.len();
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTrainReport {
    pub weight_bits: u32,
    /// Quantized backbone without updates, γ = 1.
    pub baseline_kd: f64,
    /// Untrained quantization-aware composer.
    pub initial_kd: f64,
    pub epochs: Vec<EpochStat>,
}

impl QuantTrainReport {
    pub fn final_kd(&self) -> f64 {
        self.epochs.last().map_or(self.initial_kd, |e| e.val_loss)
    }

    /// `(baseline − final) / baseline`.
    pub fn relative_gain(&self) -> f64 {
        (self.baseline_kd - self.final_kd()) / self.baseline_kd
    }
}

/// Distils the full-precision `teacher` into the quantized student through
/// the composer, which must be in γ mode.
#[allow(clippy::too_many_arguments)]
pub fn train_quant_composer<T: Scalar>(
    teacher: &Denoiser<T>,
    qb: &QuantizedBackbone<T>,
    composer: &mut Composer<T>,
    train: &SyntheticDataset,
    val_batches: &[NoisedBatch<T>],
    index: Option<&SimilarityIndex>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStat),
) -> Result<QuantTrainReport> {
    if !composer.config().gamma {
        return Err(Error::Config("quantization-aware training needs a composer with γ tokens".into()));
    }
    let targets = composer.targets().to_vec();
    let schedule = NoiseSchedule::cosine(teacher.config.timesteps);
    let baseline_kd = evaluate_kd(teacher, qb, None, &targets, val_batches)?;
    let initial_kd = evaluate_kd(teacher, qb, Some(composer), &targets, val_batches)?;
    let teacher_sum = || teacher.checksum();
    let student_sum = || qb.net.checksum();
    let epochs = fit_composer(
        composer,
        &[&teacher_sum, &student_sum],
        train,
        index,
        cfg,
        |tape, c, idx, rng| {
            let batch = NoisedBatch::draw(train, idx, teacher, &schedule, rng)?;
            student_kd_loss(tape, teacher, qb, Some(c), &targets, &batch)
        },
        |c| evaluate_kd(teacher, qb, Some(c), &targets, val_batches),
        on_epoch,
    )
    .map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("teacher or student weights changed: {m}")),
        other => other,
    })?;
    Ok(QuantTrainReport {
        weight_bits: qb.weight_bits,
        baseline_kd,
        initial_kd,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DenoiserConfig;

    #[test]
    fn grid_membership_and_passthrough() {
        let mut rng = SeededRng::new(3);
        let w = rng.randn::<f64>(&[6, 6], 1.0);
        for bits in [2u32, 4, 8] {
            let (q, s) = quantize_weight(&w, bits).unwrap();
            let qm = qmax::<f64>(bits);
            for &v in q.data() {
                let k = v / s;
                assert!((k - k.round()).abs() < 1e-9 && k.abs() <= qm + 1e-9);
            }
        }
        let (q2, _) = quantize_weight(&w, 2).unwrap();
        let mut mags: Vec<u64> = q2.data().iter().map(|v| v.abs().to_bits()).collect();
        mags.sort_unstable();
        mags.dedup();
        assert!(mags.len() <= 3);
        assert!(quantize_weight(&w, 32).unwrap().0.bit_eq(&w));
        let (z, s) = quantize_weight(&Tensor::<f64>::zeros(&[2, 2]), 4).unwrap();
        assert_eq!(s, 1.0);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kd_hand_cases() {
        let tape = Tape::inference();
        let h = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let zero = Var::constant(Tensor::zeros(&[1, 2]));
        assert_eq!(kd_loss(&tape, &h, &zero, 1).unwrap().value().item(), 1.0);
        assert_eq!(kd_loss(&tape, &h, &Var::constant(h.clone()), 1).unwrap().value().item(), 0.0);
        assert!(kd_loss(&tape, &h, &Var::constant(Tensor::zeros(&[2, 1])), 1).is_err());
    }

    #[test]
    fn mutated_frozen_model_aborts_training() {
        use crate::composer::ComposerConfig;
        use std::cell::Cell;
        let cfg = DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            d: 8,
            layers: 1,
            heads: 2,
            classes: 3,
            timesteps: 20,
        };
        let mut net = Denoiser::<f64>::new(cfg, &SeededRng::new(1)).unwrap();
        net.set_requires_grad(false);
        let ccfg = ComposerConfig { d_model: 8, heads: 2, ..Default::default() };
        let mut composer = Composer::<f64>::new(ccfg, &cfg, &SeededRng::new(0)).unwrap();
        let train = SyntheticDataset::generate(1, 48, 3, 8).unwrap();
        let calls = Cell::new(0u64);
        let drifting = || {
            calls.set(calls.get() + 1);
            calls.get()
        };
        let tc = TrainConfig { epochs: 1, batch: 4, steps_per_epoch: Some(1), ..Default::default() };
        let schedule = NoiseSchedule::cosine(cfg.timesteps);
        let err = fit_composer(
            &mut composer,
            &[&drifting],
            &train,
            None,
            &tc,
            |tape, c, idx, rng| {
                let b = NoisedBatch::draw(&train, idx, &net, &schedule, rng)?;
                crate::data::composer_loss(tape, &net, c, &b)
            },
            |_| Ok(0.0),
            |_| {},
        );
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn only_block_linears_are_quantized() {
        let cfg = DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            d: 8,
            layers: 2,
            heads: 2,
            classes: 3,
            timesteps: 20,
        };
        let net = Denoiser::<f64>::new(cfg, &SeededRng::new(1)).unwrap();
        let qb = quantize_backbone(&net, &QuantConfig { enabled: true, w_bits: 4, a_bits: 8 }).unwrap();
        assert_eq!(qb.weight_scales.len(), 12);
        let orig: BTreeMap<String, Tensor<f64>> = net.named_tensors().into_iter().collect();
        for (name, t) in qb.net.named_tensors() {
            let same = t.bit_eq(&orig[&name]);
            assert_eq!(same, !qb.weight_scales.contains_key(&name), "{name}");
        }
        assert!(quantize_backbone(&net, &QuantConfig { enabled: true, w_bits: 3, a_bits: 8 }).is_err());
    }
}
