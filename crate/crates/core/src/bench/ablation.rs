//! One-axis sweeps over composer and training settings.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::toy_frechet;
use crate::backbone::{Denoiser, TargetKind};
use crate::composer::{AttentionScheme, Composer, ComposerConfig, GeneratorArch, TokenInit};
use crate::data::{
    evaluate_val_loss, train_composer, validation_batches, BatchMode, SimilarityIndex, SyntheticDataset, TrainConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    R,
    Alpha,
    DModel,
    Targets,
    Attention,
    Arch,
    Pipeline,
    TokenInit,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::R,
        AblationAxis::Alpha,
        AblationAxis::DModel,
        AblationAxis::Targets,
        AblationAxis::Attention,
        AblationAxis::Arch,
        AblationAxis::Pipeline,
        AblationAxis::TokenInit,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "r" => AblationAxis::R,
            "alpha" | "α" => AblationAxis::Alpha,
            "d_model" => AblationAxis::DModel,
            "targets" => AblationAxis::Targets,
            "attention" => AblationAxis::Attention,
            "arch" | "generator_arch" => AblationAxis::Arch,
            "pipeline" => AblationAxis::Pipeline,
            "token_init" => AblationAxis::TokenInit,
            other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::R => "r",
            AblationAxis::Alpha => "alpha",
            AblationAxis::DModel => "d_model",
            AblationAxis::Targets => "targets",
            AblationAxis::Attention => "attention",
            AblationAxis::Arch => "arch",
            AblationAxis::Pipeline => "pipeline",
            AblationAxis::TokenInit => "token_init",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The full sweep for each axis.
pub fn default_grid(axis: AblationAxis) -> Vec<String> {
    let v: &[&str] = match axis {
        AblationAxis::R => &["4", "8", "16", "32"],
        AblationAxis::Alpha => &["0", "0.25", "0.5", "0.75", "1"],
        AblationAxis::DModel => &["32", "64", "128"],
        AblationAxis::Targets => &["QV", "QK", "QKV", "QKVO"],
        AblationAxis::Attention => &["standard", "global_local"],
        AblationAxis::Arch => &["transformer", "mlp"],
        AblationAxis::Pipeline => &["vanilla", "full_class", "context_class", "context_similarity"],
        AblationAxis::TokenInit => &["projected", "constant"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

/// Applies one grid value to copies of the base settings.
fn apply(axis: AblationAxis, value: &str, c: &mut ComposerConfig, t: &mut TrainConfig) -> Result<()> {
    let bad = || Error::Config(format!("invalid {axis} grid value `{value}`"));
    match axis {
        AblationAxis::R => {
            let r: usize = value.parse().map_err(|_| bad())?;
            if ![4, 8, 16, 32].contains(&r) {
                return Err(bad());
            }
            c.r = r;
        }
        AblationAxis::Alpha => {
            let a: f64 = value.parse().map_err(|_| bad())?;
            if ![0.0, 0.25, 0.5, 0.75, 1.0].contains(&a) {
                return Err(bad());
            }
            t.alpha = a;
        }
        AblationAxis::DModel => c.d_model = value.parse().map_err(|_| bad())?,
        AblationAxis::Targets => c.targets = TargetKind::parse_set(value).map_err(|_| bad())?,
        AblationAxis::Attention => {
            c.attention = match AttentionScheme::parse(value) {
                Some(s @ (AttentionScheme::Standard | AttentionScheme::GlobalLocal)) => s,
                _ => return Err(bad()),
            }
        }
        AblationAxis::Arch => c.arch = GeneratorArch::parse(value).ok_or_else(bad)?,
        AblationAxis::Pipeline => t.pipeline = BatchMode::parse(value).ok_or_else(bad)?,
        AblationAxis::TokenInit => c.token_init = TokenInit::parse(value).ok_or_else(bad)?,
    }
    c.validate().map_err(|e| Error::Config(format!("invalid {axis} grid value `{value}`: {e}")))?;
    t.validate().map_err(|e| Error::Config(format!("invalid {axis} grid value `{value}`: {e}")))
}

/// Everything a sweep shares across grid points.
pub struct AblationBase<'a, T: Scalar> {
    pub net: &'a Denoiser<T>,
    pub train: &'a SyntheticDataset,
    pub val: &'a SyntheticDataset,
    pub composer: ComposerConfig,
    pub train_cfg: TrainConfig,
    pub steps: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub val_loss: f64,
    pub static_val_loss: f64,
    pub toy_frechet: f64,
}

/// Trains and scores one composer per grid value. The grid is validated
/// in full before anything is trained.
pub fn run_ablation<T: Scalar>(
    axis: AblationAxis,
    grid: &[String],
    base: &AblationBase<'_, T>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config(format!("empty {axis} grid")));
    }
    let mut points = Vec::with_capacity(grid.len());
    for value in grid {
        let (mut c, mut t) = (base.composer.clone(), base.train_cfg.clone());
        apply(axis, value, &mut c, &mut t)?;
        points.push((value.clone(), c, t));
    }
    let val_batches = validation_batches(base.val, base.net, base.seed)?;
    let static_val = evaluate_val_loss(base.net, None, &val_batches)?;
    let mut index = None;
    let mut rows = Vec::with_capacity(points.len());
    for (value, c, t) in points {
        if t.pipeline == BatchMode::ContextSimilarity && index.is_none() {
            index = Some(SimilarityIndex::build(base.train));
        }
        let rng = SeededRng::new(base.seed);
        let mut composer = Composer::new(c, &base.net.config, &rng)?;
        let report = train_composer(base.net, &mut composer, base.train, base.val, index.as_ref(), &t, |_| {})?;
        let classes = base.net.config.classes;
        let sets = composer.generate(&Tape::inference(), base.net, &(0..classes).collect::<Vec<_>>())?;
        let mut images = Vec::new();
        for (class, set) in sets.iter().enumerate() {
            let mut srng = SeededRng::new(base.seed).fork_indexed("bench.sample", class as u64);
            let out = base
                .net
                .sample_loop(class, base.samples_per_class, base.steps, Some(set), None, &mut srng, None)?;
            images.extend_from_slice(out.images.data());
        }
        let side = base.net.config.image_size;
        let generated = Tensor::from_vec(&[classes * base.samples_per_class, side, side], images)?;
        let row = AblationRow {
            axis: axis.name().into(),
            value,
            val_loss: report.final_val(),
            static_val_loss: static_val,
            toy_frechet: toy_frechet(&base.val.images, &generated)?,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
