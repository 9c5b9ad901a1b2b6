//! Fréchet distance between Gaussian fits of fixed random features, a
//! desk-scale stand-in for FID.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{feature_projection, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Fewest samples per set for a usable covariance estimate.
pub const MIN_SAMPLES: usize = 64;
/// Ridge added to both covariances.
pub const COV_RIDGE: f64 = 1e-6;
const FEATURE_SEED: u64 = 0x4652_4543_4845_5431;

/// `tanh(P·x)` for every image of `[n, s, s]`, with a fixed projection.
pub fn frechet_features<T: Scalar>(images: &Tensor<T>) -> Result<DMatrix<f64>> {
    if images.ndim() != 3 {
        return Err(Error::Input(format!("expected [n, s, s] images, got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    let p = images.shape()[1] * images.shape()[2];
    let proj = feature_projection(FEATURE_SEED, p);
    let mut out = DMatrix::zeros(n, FEATURE_DIM);
    for i in 0..n {
        let img = &images.data()[i * p..(i + 1) * p];
        for k in 0..FEATURE_DIM {
            let z: f64 = img
                .iter()
                .enumerate()
                .map(|(j, &x)| x.to_f64().unwrap_or(f64::NAN) * proj[j * FEATURE_DIM + k])
                .sum();
            out[(i, k)] = z.tanh();
        }
    }
    Ok(out)
}

fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += COV_RIDGE;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁+Σ₂−2(Σ₁Σ₂)^{1/2})` for feature rows `a` and `b`.
///
/// The trace of the cross term is taken as `Σ √λ` over the eigenvalues of
/// the symmetric `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which shares its spectrum with
/// `Σ₁Σ₂`; negative round-off eigenvalues are clamped to zero.
pub fn frechet_from_features(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    for (name, x) in [("first", a), ("second", b)] {
        if x.nrows() < MIN_SAMPLES {
            return Err(Error::Input(format!(
                "{name} set has {} samples; the Fréchet score needs at least {MIN_SAMPLES}",
                x.nrows()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{name} Fréchet feature set"),
                index: x.iter().position(|v| !v.is_finite()).unwrap_or(0),
            });
        }
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape("frechet", &[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]));
    }
    let (mu1, s1) = gaussian_fit(a);
    let (mu2, s2) = gaussian_fit(b);
    let s1h = psd_sqrt(&s1);
    let cross = &s1h * &s2 * &s1h;
    let cross = (&cross + cross.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(cross).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let score = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(score.max(0.0))
}

/// Toy Fréchet score between two image sets `[n, s, s]`.
pub fn toy_frechet<T: Scalar, U: Scalar>(real: &Tensor<T>, generated: &Tensor<U>) -> Result<f64> {
    frechet_from_features(&frechet_features(real)?, &frechet_features(generated)?)
}
