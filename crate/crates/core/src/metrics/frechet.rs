//! Fréchet distance between Gaussians fitted to embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues down to this (scaled) bound are treated as rounding noise.
pub const EIG_CLAMP: f64 = 1e-8;
const SYM_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        if cov.len() != mean.len() * mean.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs: vec![mean.len()],
                rhs: vec![cov.len()],
            });
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `rows`.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid("fitting a Gaussian needs at least two samples"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("embedding rows differ in width"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Gaussian { mean, cov })
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > SYM_TOL * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        Ok((&m + m.transpose()) * 0.5)
    }
}

/// Eigenvalues of a symmetric matrix with small negatives clamped to zero.
fn clamped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.amax().max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIG_CLAMP * scale {
            return Err(Error::invalid(format!("matrix is not positive semi-definite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, clamped at zero.
///
/// The trace term uses `tr((S1 S2)^(1/2)) = tr((A S2 A)^(1/2))` with
/// `A = S1^(1/2)`, which keeps every root symmetric.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "frechet",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let (s1, s2) = (a.matrix()?, b.matrix()?);
    let diff = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let root1 = sqrt_psd(s1.clone())?;
    let inner = &root1 * &s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clamped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}
