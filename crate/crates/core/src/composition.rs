//! Applying low-rank updates to frozen weights.
//!
//! With row-vector activations `x` (`[n, d_in]`) and `W` stored `[d_out, d_in]`,
//! the training path computes `x·Wᵀ + (x·Bᵀ)·Aᵀ` — right to left, never forming
//! the `d_out × d_in` product `AB` — so gradients reach `A` and `B`. The
//! inference path materializes `W' = W + AB` once and then applies a single
//! dense product per call.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::backbone::Target;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tape, Tensor, Var};

/// `A` is `[d_out, r]`, `B` is `[r, d_in]`.
#[derive(Debug, Clone)]
pub struct LowRankUpdate<T: Scalar> {
    pub a: Var<T>,
    pub b: Var<T>,
}

impl<T: Scalar> LowRankUpdate<T> {
    pub fn new(a: Var<T>, b: Var<T>) -> Result<Self> {
        if a.value().ndim() != 2 || b.value().ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("low-rank update", a.shape(), b.shape()));
        }
        Ok(LowRankUpdate { a, b })
    }

    pub fn from_tensors(a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        Self::new(Var::constant(a), Var::constant(b))
    }

    pub fn zeros(d_out: usize, d_in: usize, r: usize) -> Self {
        LowRankUpdate {
            a: Var::constant(Tensor::zeros(&[d_out, r])),
            b: Var::constant(Tensor::zeros(&[r, d_in])),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Self {
        LowRankUpdate {
            a: self.a.detach(),
            b: self.b.detach(),
        }
    }

    /// The dense product `AB`.
    pub fn product(&self) -> Result<Tensor<T>> {
        self.a.value().matmul(self.b.value())
    }

    pub fn is_finite(&self) -> bool {
        self.a.value().is_finite() && self.b.value().is_finite()
    }
}

/// Updates for a list of targets, plus one activation scale per target in
/// quantization-aware mode.
#[derive(Debug, Clone)]
pub struct UpdateSet<T: Scalar> {
    pub entries: Vec<(Target, LowRankUpdate<T>)>,
    pub gammas: Option<Vec<Var<T>>>,
}

impl<T: Scalar> UpdateSet<T> {
    pub fn new(entries: Vec<(Target, LowRankUpdate<T>)>) -> Self {
        UpdateSet {
            entries,
            gammas: None,
        }
    }

    pub fn zeros(targets: &[Target], d: usize, r: usize) -> Self {
        Self::new(
            targets
                .iter()
                .map(|&t| (t, LowRankUpdate::zeros(d, d, r)))
                .collect(),
        )
    }

    pub fn get(&self, target: Target) -> Option<&LowRankUpdate<T>> {
        self.entries.iter().find(|(t, _)| *t == target).map(|(_, u)| u)
    }

    pub fn gamma(&self, target: Target) -> Option<&Var<T>> {
        let i = self.entries.iter().position(|(t, _)| *t == target)?;
        self.gammas.as_ref().map(|g| &g[i])
    }

    pub fn targets(&self) -> Vec<Target> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn detach(&self) -> Self {
        UpdateSet {
            entries: self.entries.iter().map(|(t, u)| (*t, u.detach())).collect(),
            gammas: self
                .gammas
                .as_ref()
                .map(|g| g.iter().map(Var::detach).collect()),
        }
    }

    /// Largest absolute difference between corresponding factors.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        let mut m = T::zero();
        for ((ta, ua), (tb, ub)) in self.entries.iter().zip(&other.entries) {
            if ta != tb {
                return Err(Error::Contract(format!("target mismatch {ta} vs {tb}")));
            }
            m = m
                .max(ua.a.value().max_abs_diff(ub.a.value())?)
                .max(ua.b.value().max_abs_diff(ub.b.value())?);
        }
        Ok(m)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ta, ua), (tb, ub))| {
                ta == tb && ua.a.value().bit_eq(ub.a.value()) && ua.b.value().bit_eq(ub.b.value())
            })
    }
}

/// Merge and inference-path application counts.
#[derive(Debug, Default)]
pub struct MergeCounter {
    merges: AtomicUsize,
    applications: AtomicUsize,
}

impl MergeCounter {
    pub fn merges(&self) -> usize {
        self.merges.load(Ordering::Relaxed)
    }

    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub(crate) fn count_application(&self) {
        self.applications.fetch_add(1, Ordering::Relaxed);
    }
}

/// Per-instance dense weights `W' = W + AB` for every target of one
/// [`UpdateSet`], with the activation scales it carried.
#[derive(Debug, Clone)]
pub struct MergedWeights<T: Scalar> {
    pub weights: BTreeMap<Target, Tensor<T>>,
    pub gammas: BTreeMap<Target, T>,
    /// Free-form description of the update set that produced the weights.
    pub provenance: String,
}

impl<T: Scalar> MergedWeights<T> {
    pub fn weight(&self, target: Target) -> Option<&Tensor<T>> {
        self.weights.get(&target)
    }

    pub fn bytes(&self) -> usize {
        self.weights.values().map(Tensor::bytes).sum()
    }
}

/// `h = x·Wᵀ + (x·Bᵀ)·Aᵀ`; `AB` is never materialized.
pub fn apply_training_path<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    w: &Var<T>,
    update: Option<&LowRankUpdate<T>>,
) -> Result<Var<T>> {
    let base = tape.matmul_nt(x, w)?;
    match update {
        None => Ok(base),
        Some(u) => {
            check_update(w.value(), u)?;
            let low = low_rank_term(tape, x, u)?;
            tape.add(&base, &low)
        }
    }
}

/// `(x·Bᵀ)·Aᵀ`.
pub fn low_rank_term<T: Scalar>(tape: &Tape<T>, x: &Var<T>, u: &LowRankUpdate<T>) -> Result<Var<T>> {
    let xb = tape.matmul_nt(x, &u.b)?;
    tape.matmul_nt(&xb, &u.a)
}

fn check_update<T: Scalar>(w: &Tensor<T>, u: &LowRankUpdate<T>) -> Result<()> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if u.a.shape()[0] != out || u.b.shape()[1] != inp {
        return Err(Error::shape("low-rank update vs weight", w.shape(), &[
            u.a.shape()[0],
            u.b.shape()[1],
        ]));
    }
    Ok(())
}

/// `W + AB`, leaving `W` untouched.
pub fn merge<T: Scalar>(w: &Tensor<T>, update: &LowRankUpdate<T>) -> Result<Tensor<T>> {
    if w.ndim() != 2 {
        return Err(Error::Contract(format!("merge into shape {:?}", w.shape())));
    }
    check_update(w, update)?;
    w.add(&update.product()?)
}

/// Merges every entry of `updates` against the frozen weights looked up by
/// `weight_of`, counting one merge.
pub fn merge_all<T: Scalar>(
    weight_of: impl Fn(Target) -> Result<Tensor<T>>,
    updates: &UpdateSet<T>,
    counter: Option<&MergeCounter>,
    provenance: impl Into<String>,
) -> Result<MergedWeights<T>> {
    let mut weights = BTreeMap::new();
    for (target, u) in &updates.entries {
        weights.insert(*target, merge(&weight_of(*target)?, u)?);
    }
    let mut gammas = BTreeMap::new();
    if let Some(g) = &updates.gammas {
        for ((target, _), gv) in updates.entries.iter().zip(g) {
            gammas.insert(*target, gv.value().item());
        }
    }
    if let Some(c) = counter {
        c.merges.fetch_add(1, Ordering::Relaxed);
    }
    Ok(MergedWeights {
        weights,
        gammas,
        provenance: provenance.into(),
    })
}

/// `h = x·W'ᵀ`: one dense product regardless of rank.
pub fn apply_inference_path<T: Scalar>(tape: &Tape<T>, x: &Var<T>, merged: &Tensor<T>) -> Result<Var<T>> {
    tape.matmul_nt(x, &Var::constant(merged.clone()))
}

/// Multiply-accumulates per token of the training path: `d_out·d_in + r·(d_in + d_out)`.
pub fn training_path_flops(d_out: usize, d_in: usize, r: usize) -> usize {
    d_out * d_in + r * (d_in + d_out)
}

/// Max over `probes` random inputs of `‖(Wx + ABx) − (W + AB)x‖_∞`.
pub fn path_equivalence_check<T: Scalar>(
    w: &Tensor<T>,
    update: &LowRankUpdate<T>,
    probes: usize,
    rng: &mut SeededRng,
) -> Result<T> {
    if probes == 0 {
        return Err(Error::Contract("path equivalence needs at least one probe".into()));
    }
    let tape = Tape::inference();
    let merged = merge(w, update)?;
    let x = Var::constant(rng.randn::<T>(&[probes, w.shape()[1]], 1.0));
    let train = apply_training_path(&tape, &x, &Var::constant(w.clone()), Some(update))?;
    let infer = apply_inference_path(&tape, &x, &merged)?;
    train.value().max_abs_diff(infer.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_update(rng: &mut SeededRng, d: usize, r: usize) -> LowRankUpdate<f64> {
        LowRankUpdate::from_tensors(rng.randn(&[d, r], 0.3), rng.randn(&[r, d], 0.3)).unwrap()
    }

    #[test]
    fn zero_b_is_plain_product() {
        let mut rng = SeededRng::new(1);
        let w = rng.randn::<f32>(&[6, 6], 1.0);
        let x = Var::constant(rng.randn::<f32>(&[3, 6], 1.0));
        let u = LowRankUpdate::from_tensors(rng.randn(&[6, 2], 1.0), Tensor::zeros(&[2, 6])).unwrap();
        let tape = Tape::inference();
        let h = apply_training_path(&tape, &x, &Var::constant(w.clone()), Some(&u)).unwrap();
        let plain = tape.matmul_nt(&x, &Var::constant(w)).unwrap();
        assert!(h.value().bit_eq(plain.value()));
    }

    #[test]
    fn zero_w_matches_dense_oracle() {
        let mut rng = SeededRng::new(2);
        let u = rand_update(&mut rng, 5, 2);
        let x = rng.randn::<f64>(&[1, 5], 1.0);
        let tape = Tape::inference();
        let h = apply_training_path(&tape, &Var::constant(x.clone()), &Var::constant(Tensor::zeros(&[5, 5])), Some(&u))
            .unwrap();
        let ab = u.product().unwrap();
        for i in 0..5 {
            let want: f64 = (0..5).map(|j| ab.at(&[i, j]) * x.at(&[0, j])).sum();
            assert!((h.value().at(&[0, i]) - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn flop_budget() {
        assert!(training_path_flops(64, 64, 8) < 3 * 64 * 64 / 2);
    }

    #[test]
    fn merge_hand_case() {
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let u = LowRankUpdate::from_tensors(
            Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let m = merge(&w, &u).unwrap();
        assert_eq!(m.data(), &[4.0, 4.0, 6.0, 9.0]);
        assert_eq!(w.data(), &[1.0, 0.0, 0.0, 1.0]);
        let zero = LowRankUpdate::zeros(2, 2, 1);
        assert!(merge(&w, &zero).unwrap().bit_eq(&w));
    }

    #[test]
    fn paths_agree() {
        let mut rng = SeededRng::new(3);
        let w = rng.randn::<f64>(&[64, 64], 0.2);
        let u = rand_update(&mut rng, 64, 8);
        assert!(path_equivalence_check(&w, &u, 16, &mut rng).unwrap() <= 1e-10);
        let zero = LowRankUpdate::zeros(64, 64, 8);
        assert_eq!(path_equivalence_check(&w, &zero, 4, &mut rng).unwrap(), 0.0);
    }
}
