//! Synthetic class-conditional images, similarity features, the four batch
//! pipelines, and the training loops.
//!
//! Class `c` of `C` is an oriented sinusoid with
//!
//! ```text
//! f_c = 1 + (c mod 4)/2          cycles per image side
//! θ_c = π·c / C                   orientation
//! x(u, v) = 0.6·sin(2π·f_c·(u·cosθ_c + v·sinθ_c)/side + φ) + blob + noise
//! ```
//!
//! with a per-sample phase `φ ~ U[−π/4, π/4]`, one Gaussian blob (amplitude
//! ±0.4, width 2 px, uniform centre) and N(0, 0.05²) pixel noise, clipped to
//! `[−1, 1]`. The bounded phase keeps class means distinct.

mod train;

use serde::{Deserialize, Serialize};

pub use train::{
    composer_loss, evaluate_val_loss, pretrain_backbone, train_composer, validation_batches, EpochStat,
    NoisedBatch, PretrainConfig, PretrainReport, TrainConfig, TrainReport,
};
pub(crate) use train::fit_composer;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

pub const FEATURE_DIM: usize = 32;

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub classes: usize,
    pub side: usize,
    /// `[n, side, side]`, values in `[−1, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn generate(seed: u64, n: usize, classes: usize, side: usize) -> Result<Self> {
        if classes < 2 || n < classes {
            return Err(Error::Config(format!(
                "dataset needs N ≥ C ≥ 2, got N={n}, C={classes}"
            )));
        }
        let mut rng = SeededRng::new(seed).fork("data.images");
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        rng.shuffle(&mut labels);
        let mut pixels = Vec::with_capacity(n * side * side);
        for &c in &labels {
            let f = 1.0 + (c % 4) as f64 / 2.0;
            let theta = std::f64::consts::PI * c as f64 / classes as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let phase = rng.uniform_range(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
            let (bu, bv) = (rng.uniform_range(0.0, side as f64), rng.uniform_range(0.0, side as f64));
            let amp = if rng.uniform() < 0.5 { -0.4 } else { 0.4 };
            for v in 0..side {
                for u in 0..side {
                    let (uf, vf) = (u as f64, v as f64);
                    let wave = 0.6 * (2.0 * std::f64::consts::PI * f * (uf * ct + vf * st) / side as f64 + phase).sin();
                    let r2 = (uf - bu).powi(2) + (vf - bv).powi(2);
                    let blob = amp * (-r2 / 8.0).exp();
                    let noise = 0.05 * rng.normal();
                    pixels.push((wave + blob + noise).clamp(-1.0, 1.0) as f32);
                }
            }
        }
        Ok(SyntheticDataset {
            seed,
            classes,
            side,
            images: Tensor::from_vec(&[n, side, side], pixels)?,
            labels,
        })
    }

    /// Training and validation sets drawn from independent streams of `seed`.
    pub fn train_val(seed: u64, n: usize, classes: usize, side: usize) -> Result<(Self, Self)> {
        let val_seed = SeededRng::new(seed).fork("data.val").next_u64();
        Ok((
            Self::generate(seed, n, classes, side)?,
            Self::generate(val_seed, (n / 4).max(classes), classes, side)?,
        ))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.side * self.side;
        &self.images.data()[i * p..(i + 1) * p]
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Images of `indices`, `[k, side, side]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.side * self.side);
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(&[indices.len(), self.side, self.side], out).expect("gather shape")
    }
}

/// Fixed random-projection features, unit-normalized so cosine similarity is
/// a dot product.
#[derive(Debug, Clone)]
pub struct SimilarityIndex {
    features: Vec<[f64; FEATURE_DIM]>,
}

/// The projection used for dataset features; shared with the Fréchet score
/// so both see the same pixels-to-features map for a given seed.
pub fn feature_projection(seed: u64, pixels: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(seed).fork("data.features");
    (0..pixels * FEATURE_DIM)
        .map(|_| rng.normal() / (pixels as f64).sqrt())
        .collect()
}

impl SimilarityIndex {
    pub fn build(ds: &SyntheticDataset) -> Self {
        let p = ds.side * ds.side;
        let proj = feature_projection(ds.seed, p);
        let features = (0..ds.len())
            .map(|i| {
                let img = ds.image(i);
                let mut f = [0.0; FEATURE_DIM];
                for (k, fk) in f.iter_mut().enumerate() {
                    *fk = img.iter().enumerate().map(|(j, &x)| x as f64 * proj[j * FEATURE_DIM + k]).sum();
                }
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                f.iter_mut().for_each(|v| *v /= norm);
                f
            })
            .collect();
        SimilarityIndex { features }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64; FEATURE_DIM] {
        &self.features[i]
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.features[i].iter().zip(&self.features[j]).map(|(a, b)| a * b).sum()
    }

    /// All indices ordered by decreasing similarity to `anchor` (ties by
    /// index); the anchor itself comes first.
    pub fn ranked(&self, anchor: usize) -> Vec<usize> {
        let sims: Vec<f64> = (0..self.len()).map(|j| self.cosine(anchor, j)).collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            if a == anchor {
                return std::cmp::Ordering::Less;
            }
            if b == anchor {
                return std::cmp::Ordering::Greater;
            }
            sims[b].total_cmp(&sims[a]).then(a.cmp(&b))
        });
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Vanilla,
    FullClass,
    ContextClass,
    ContextSimilarity,
}

impl BatchMode {
    pub const ALL: [BatchMode; 4] = [
        BatchMode::Vanilla,
        BatchMode::FullClass,
        BatchMode::ContextClass,
        BatchMode::ContextSimilarity,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(Self::Vanilla),
            "full_class" => Some(Self::FullClass),
            "context_class" => Some(Self::ContextClass),
            "context_similarity" => Some(Self::ContextSimilarity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::FullClass => "full_class",
            Self::ContextClass => "context_class",
            Self::ContextSimilarity => "context_similarity",
        }
    }

    pub fn needs_anchor(self) -> bool {
        !matches!(self, Self::Vanilla)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub alpha: f64,
    pub b: usize,
    pub mode: BatchMode,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            alpha: 0.75,
            b: 16,
            mode: BatchMode::ContextClass,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("train.alpha {} outside [0, 1]", self.alpha)));
        }
        if self.b == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        Ok(())
    }

    /// `⌈α·b⌉`, computed so that exact products are not pushed up by
    /// rounding noise.
    pub fn similar_count(&self) -> usize {
        let x = self.alpha * self.b as f64;
        let c = x.ceil();
        if c - x > 1.0 - 1e-9 {
            x.round() as usize
        } else {
            c as usize
        }
    }
}

/// Dataset indices of one batch; the first `similar` entries are the
/// same-context draws of a context mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub similar: usize,
    pub anchor: Option<usize>,
}

/// Builds one batch. `index` is required for `ContextSimilarity`.
pub fn sample_batch(
    ds: &SyntheticDataset,
    spec: &BatchSpec,
    anchor: Option<usize>,
    index: Option<&SimilarityIndex>,
    rng: &mut SeededRng,
) -> Result<Batch> {
    spec.validate()?;
    let b = spec.b;
    if spec.mode == BatchMode::Vanilla {
        return Ok(Batch {
            indices: (0..b).map(|_| rng.index(0, ds.len())).collect(),
            similar: 0,
            anchor,
        });
    }
    let anchor = anchor.ok_or_else(|| Error::Input(format!("{} batches need an anchor", spec.mode.name())))?;
    if anchor >= ds.len() {
        return Err(Error::Input(format!("anchor {anchor} outside dataset of {}", ds.len())));
    }
    let class = ds.labels[anchor];
    let same = ds.indices_of_class(class);
    let (k, mode) = match spec.mode {
        BatchMode::FullClass => (b, BatchMode::FullClass),
        m => (spec.similar_count(), m),
    };
    let mut indices = Vec::with_capacity(b);
    match mode {
        BatchMode::FullClass | BatchMode::ContextClass => {
            if same.len() < k {
                return Err(Error::Data(format!(
                    "class {class} has {} samples, batch needs {k}",
                    same.len()
                )));
            }
            // the anchor always leads its own context
            let rest: Vec<usize> = same.iter().copied().filter(|&i| i != anchor).collect();
            if k > 0 {
                indices.push(anchor);
                indices.extend(rng.choose_distinct(&rest, k - 1));
            }
            let others: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != class).collect();
            if others.is_empty() && b > k {
                return Err(Error::Data("no samples outside the anchor class".into()));
            }
            for _ in k..b {
                indices.push(others[rng.index(0, others.len())]);
            }
        }
        BatchMode::ContextSimilarity => {
            let index = index.ok_or_else(|| Error::Input("context_similarity needs a similarity index".into()))?;
            if index.len() != ds.len() {
                return Err(Error::Data("similarity index does not match dataset".into()));
            }
            let ranked = index.ranked(anchor);
            indices.extend_from_slice(&ranked[..k.min(ranked.len())]);
            let far = &ranked[ranked.len() - (ranked.len() / 4).max(1)..];
            for _ in k..b {
                indices.push(far[rng.index(0, far.len())]);
            }
        }
        BatchMode::Vanilla => unreachable!(),
    }
    Ok(Batch {
        indices,
        similar: k,
        anchor: Some(anchor),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_reproducible_and_balanced() {
        let a = SyntheticDataset::generate(5, 103, 10, 16).unwrap();
        let b = SyntheticDataset::generate(5, 103, 10, 16).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        for c in 0..10 {
            let n = a.indices_of_class(c).len();
            assert!((10..=11).contains(&n));
        }
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(SyntheticDataset::generate(5, 1, 2, 16).is_err());
    }

    #[test]
    fn similar_count_is_a_ceiling() {
        let s = |alpha, b| BatchSpec { alpha, b, mode: BatchMode::ContextClass }.similar_count();
        assert_eq!(s(0.75, 8), 6);
        assert_eq!(s(0.25, 8), 2);
        assert_eq!(s(0.3, 8), 3);
        assert_eq!(s(0.0, 16), 0);
        assert_eq!(s(1.0, 16), 16);
    }

    #[test]
    fn context_class_counts() {
        let ds = SyntheticDataset::generate(1, 200, 4, 8).unwrap();
        let mut rng = SeededRng::new(2);
        let spec = BatchSpec { alpha: 0.75, b: 8, mode: BatchMode::ContextClass };
        let batch = sample_batch(&ds, &spec, Some(3), None, &mut rng).unwrap();
        let class = ds.labels[3];
        let same = batch.indices.iter().filter(|&&i| ds.labels[i] == class).count();
        assert_eq!(same, 6);
        assert!(batch.indices[..6].iter().all(|&i| ds.labels[i] == class));
        let spec = BatchSpec { mode: BatchMode::FullClass, ..spec };
        let small = SyntheticDataset::generate(1, 12, 4, 8).unwrap();
        assert!(matches!(
            sample_batch(&small, &spec, Some(0), None, &mut rng),
            Err(Error::Data(_))
        ));
        assert!(matches!(sample_batch(&ds, &spec, None, None, &mut rng), Err(Error::Input(_))));
    }
}
