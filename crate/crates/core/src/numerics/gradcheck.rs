//! Central finite-difference checks of tape gradients (64-bit only).
//!
//! The reported error for a coordinate `i` is
//! `|ad_i − (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h| / (|ad_i| + 1e-12)`.

use super::param::{Module, Param};
use super::rng::SeededRng;
use super::tape::Mask;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel: f64,
    pub max_abs: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl FdReport {
    fn empty() -> Self {
        FdReport {
            max_rel: 0.0,
            max_abs: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, ad: f64, fd: f64) {
        let abs = (ad - fd).abs();
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(abs / (ad.abs() + 1e-12));
        self.checked += 1;
    }

    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            max_rel: self.max_rel.max(other.max_rel),
            max_abs: self.max_abs.max(other.max_abs),
            checked: self.checked + other.checked,
        }
    }
}

fn eval_scalar(v: &Var<f64>, context: &str, index: usize) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::Contract(format!(
            "finite-difference target must be scalar, got {:?}",
            v.shape()
        )));
    }
    let y = v.value().item();
    if !y.is_finite() {
        return Err(Error::NonFinite {
            context: context.to_string(),
            index,
        });
    }
    Ok(y)
}

fn perturbed(x: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut v = x.to_vec();
    v[i] += delta;
    Tensor::from_vec_unchecked(x.shape(), v)
}

/// Max relative error between the tape gradient of `f` at `point` and central
/// differences with step `h`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    Ok(finite_diff_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(point), h)?.max_rel)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor<f64>], h: f64) -> Result<FdReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &leaves)?;
    eval_scalar(&loss, "autodiff forward", 0)?;
    let grads = tape.backward(&loss)?;
    let mut report = FdReport::empty();
    for (k, (p, leaf)) in points.iter().zip(&leaves).enumerate() {
        let ad = grads.wrt(leaf);
        for i in 0..p.numel() {
            let side = |delta: f64| -> Result<f64> {
                let probe = Tape::inference();
                let vars: Vec<Var<f64>> = points
                    .iter()
                    .enumerate()
                    .map(|(j, q)| {
                        Var::constant(if j == k { perturbed(q, i, delta) } else { q.clone() })
                    })
                    .collect();
                eval_scalar(&f(&probe, &vars)?, &format!("input {k}"), i)
            };
            let fd = (side(h)? - side(-h)?) / (2.0 * h);
            report.record(ad.data()[i], fd);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every trainable parameter of `module`.
/// `max_coords` bounds the number of coordinates probed per parameter (evenly
/// strided); `None` probes all of them.
pub fn finite_diff_check_module<M, F>(module: &M, f: F, h: f64, max_coords: Option<usize>) -> Result<FdReport>
where
    M: Module<f64> + Clone,
    F: Fn(&Tape<f64>, &M) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let loss = f(&tape, module)?;
    eval_scalar(&loss, "autodiff forward", 0)?;
    let grads = tape.backward(&loss)?;

    let mut targets: Vec<(String, Vec<usize>)> = Vec::new();
    module.visit(&mut |p: &Param<f64>| {
        if p.requires_grad() {
            let n = p.value().numel();
            let coords = match max_coords {
                Some(k) if k < n => {
                    let stride = n as f64 / k as f64;
                    (0..k).map(|j| (j as f64 * stride) as usize).collect()
                }
                _ => (0..n).collect(),
            };
            targets.push((p.name().to_string(), coords));
        }
    });

    let mut report = FdReport::empty();
    for (name, coords) in targets {
        let ad = grads
            .param(&name)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` was never bound to the tape")))?;
        for i in coords {
            let side = |delta: f64| -> Result<f64> {
                let mut m = module.clone();
                m.visit_mut(&mut |p| {
                    if p.name() == name {
                        let v = perturbed(p.value(), i, delta);
                        p.set_value(v).expect("same shape");
                    }
                });
                let probe = Tape::inference();
                eval_scalar(&f(&probe, &m)?, &name, i)
            };
            let fd = (side(h)? - side(-h)?) / (2.0 * h);
            report.record(ad.data()[i], fd);
        }
    }
    Ok(report)
}

/// One gradient check per differentiable tape primitive, each over
/// `instances` random small inputs. Every primitive's output is contracted
/// with a fixed random weight tensor so all output coordinates matter.
pub fn primitive_suite(instances: usize, seed: u64, h: f64) -> Result<Vec<(&'static str, FdReport)>> {
    use super::tape::Unary;
    use std::sync::Arc;

    type Case = (
        &'static str,
        Box<dyn Fn(&mut SeededRng) -> Vec<Tensor<f64>>>,
        Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>,
    );

    fn contract(tape: &Tape<f64>, out: &Var<f64>, salt: u64) -> Result<Var<f64>> {
        let mut rng = SeededRng::new(salt);
        let w = Var::constant(rng.randn(out.shape(), 1.0));
        tape.sum(&tape.mul(out, &w)?)
    }

    let mut cases: Vec<Case> = vec![
        (
            "matmul",
            Box::new(|r| vec![r.randn(&[3, 4], 1.0), r.randn(&[4, 2], 1.0)]),
            Box::new(|t, x| contract(t, &t.matmul(&x[0], &x[1])?, 1)),
        ),
        (
            "matmul_nt",
            Box::new(|r| vec![r.randn(&[3, 4], 1.0), r.randn(&[5, 4], 1.0)]),
            Box::new(|t, x| contract(t, &t.matmul_nt(&x[0], &x[1])?, 2)),
        ),
        (
            "matmul_tn",
            Box::new(|r| vec![r.randn(&[4, 3], 1.0), r.randn(&[4, 2], 1.0)]),
            Box::new(|t, x| contract(t, &t.matmul_tn(&x[0], &x[1])?, 3)),
        ),
        (
            "matmul_batched",
            Box::new(|r| vec![r.randn(&[2, 3, 4], 1.0), r.randn(&[2, 4, 3], 1.0)]),
            Box::new(|t, x| contract(t, &t.matmul(&x[0], &x[1])?, 4)),
        ),
        (
            "transpose",
            Box::new(|r| vec![r.randn(&[3, 5], 1.0)]),
            Box::new(|t, x| contract(t, &t.transpose(&x[0])?, 5)),
        ),
        (
            "add",
            Box::new(|r| vec![r.randn(&[3, 4], 1.0), r.randn(&[3, 4], 1.0)]),
            Box::new(|t, x| contract(t, &t.add(&x[0], &x[1])?, 6)),
        ),
        (
            "sub",
            Box::new(|r| vec![r.randn(&[3, 4], 1.0), r.randn(&[3, 4], 1.0)]),
            Box::new(|t, x| contract(t, &t.sub(&x[0], &x[1])?, 7)),
        ),
        (
            "mul",
            Box::new(|r| vec![r.randn(&[3, 4], 1.0), r.randn(&[3, 4], 1.0)]),
            Box::new(|t, x| contract(t, &t.mul(&x[0], &x[1])?, 8)),
        ),
        (
            "scale",
            Box::new(|r| vec![r.randn(&[6], 1.0)]),
            Box::new(|t, x| contract(t, &t.scale(&x[0], -1.7)?, 9)),
        ),
        (
            "mul_scalar",
            Box::new(|r| vec![r.randn(&[2, 3], 1.0), r.randn(&[1], 1.0)]),
            Box::new(|t, x| contract(t, &t.mul_scalar(&x[0], &x[1])?, 10)),
        ),
        (
            "add_bias",
            Box::new(|r| vec![r.randn(&[4, 3], 1.0), r.randn(&[3], 1.0)]),
            Box::new(|t, x| contract(t, &t.add_bias(&x[0], &x[1])?, 11)),
        ),
        (
            "add_tiled",
            Box::new(|r| vec![r.randn(&[6, 3], 1.0), r.randn(&[2, 3], 1.0)]),
            Box::new(|t, x| contract(t, &t.add_tiled(&x[0], &x[1])?, 12)),
        ),
        (
            "add_per_seq",
            Box::new(|r| vec![r.randn(&[6, 3], 1.0), r.randn(&[2, 3], 1.0)]),
            Box::new(|t, x| contract(t, &t.add_per_seq(&x[0], &x[1], 3)?, 13)),
        ),
        (
            "sum",
            Box::new(|r| vec![r.randn(&[5], 1.0)]),
            Box::new(|t, x| t.scale(&t.sum(&x[0])?, 0.7)),
        ),
        (
            "mean",
            Box::new(|r| vec![r.randn(&[2, 5], 1.0)]),
            Box::new(|t, x| contract(t, &t.mean(&x[0])?, 14)),
        ),
        (
            "layer_norm",
            Box::new(|r| vec![r.randn(&[3, 5], 1.0), r.randn(&[5], 1.0), r.randn(&[5], 1.0)]),
            Box::new(|t, x| contract(t, &t.layer_norm(&x[0], &x[1], &x[2], 1e-5)?, 15)),
        ),
        (
            "softmax",
            Box::new(|r| vec![r.randn(&[2, 3, 4], 1.0)]),
            Box::new(|t, x| contract(t, &t.softmax_masked(&x[0], None)?, 16)),
        ),
        (
            "softmax_masked",
            Box::new(|r| vec![r.randn(&[2, 3, 4], 1.0)]),
            Box::new(|t, x| {
                let mask = Arc::new(Mask::from_fn(3, 4, |q, k| k <= q || k == 3));
                contract(t, &t.softmax_masked(&x[0], Some(&mask))?, 17)
            }),
        ),
        (
            "reshape",
            Box::new(|r| vec![r.randn(&[2, 6], 1.0)]),
            Box::new(|t, x| contract(t, &t.reshape(&x[0], &[3, 4])?, 18)),
        ),
        (
            "split_heads",
            Box::new(|r| vec![r.randn(&[6, 4], 1.0)]),
            Box::new(|t, x| contract(t, &t.split_heads(&x[0], 3, 2)?, 19)),
        ),
        (
            "merge_heads",
            Box::new(|r| vec![r.randn(&[4, 3, 2], 1.0)]),
            Box::new(|t, x| contract(t, &t.merge_heads(&x[0], 3, 2)?, 20)),
        ),
        (
            "rows",
            Box::new(|r| vec![r.randn(&[5, 3], 1.0)]),
            Box::new(|t, x| contract(t, &t.rows(&x[0], 1, 3)?, 21)),
        ),
        (
            "concat_rows",
            Box::new(|r| vec![r.randn(&[2, 3], 1.0), r.randn(&[1, 3], 1.0)]),
            Box::new(|t, x| contract(t, &t.concat_rows(&[x[0].clone(), x[1].clone()])?, 22)),
        ),
        (
            "gather_rows",
            Box::new(|r| vec![r.randn(&[4, 3], 1.0)]),
            Box::new(|t, x| contract(t, &t.gather_rows(&x[0], &[2, 0, 2])?, 23)),
        ),
        (
            "fake_quantize_ste",
            Box::new(|r| vec![r.randn(&[8], 1.0)]),
            Box::new(|t, x| contract(t, &t.fake_quantize(&x[0], 8, 0.05, false)?, 24)),
        ),
    ];
    for (name, op) in [
        ("gelu", Unary::Gelu),
        ("tanh", Unary::Tanh),
        ("softplus", Unary::Softplus),
        ("square", Unary::Square),
        ("sin", Unary::Sin),
        ("exp", Unary::Exp),
        ("recip", Unary::Recip),
        ("neg", Unary::Neg),
    ] {
        let gen: Box<dyn Fn(&mut SeededRng) -> Vec<Tensor<f64>>> = if op == Unary::Recip {
            // keep away from the pole
            Box::new(|r| {
                vec![Tensor::from_fn(&[6], |_| {
                    let m = r.uniform_range(0.5, 2.0);
                    if r.uniform() < 0.5 { -m } else { m }
                })]
            })
        } else {
            Box::new(|r| vec![r.randn(&[6], 1.0)])
        };
        cases.push((name, gen, Box::new(move |t, x| contract(t, &t.unary(&x[0], op)?, 30))));
    }

    let root = SeededRng::new(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, gen, f) in &cases {
        let mut rng = root.fork(name);
        let mut report = FdReport::empty();
        for _ in 0..instances {
            let inputs = gen(&mut rng);
            report = report.merge(finite_diff_check_many(f, &inputs, h)?);
        }
        out.push((*name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_vec(&[3], vec![0.2, -1.0, 4.0]).unwrap();
        let err = finite_diff_check(|t, x| t.sum(&t.scale(x, 2.5)?), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn sine_at_half() {
        let x = Tensor::scalar(0.5);
        let err =
            finite_diff_check(|t, x| t.sum(&t.unary(x, super::super::tape::Unary::Sin)?), &x, 1e-5)
                .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_finite_names_coordinate() {
        let x = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, x| t.sum(&t.unary(x, super::super::tape::Unary::Recip)?),
            &x,
            1.0,
        );
        // the unperturbed forward already evaluates 1/0
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
