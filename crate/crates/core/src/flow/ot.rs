use nalgebra::{DMatrix, DVector};

use super::{FlowError, Result};

/// Closed-form quadratic transport from `N(mean, cov)` to `N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOtReference {
    /// `|mean|^2 + tr(cov + I - 2 cov^{1/2})`.
    pub w2_sq: f64,
    pub dim: usize,
}

impl GaussianOtReference {
    /// KL divergence of `N(m, s)` from the standard normal.
    pub fn kl(&self, m: &[f64], s: &[f64]) -> Result<f64> {
        kl_to_standard_normal(m, s)
    }
}

fn symmetric(cov: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if cov.len() != d * d {
        return Err(FlowError::Dimension {
            expected: d * d,
            got: cov.len(),
        });
    }
    let a = DMatrix::from_row_slice(d, d, cov);
    let asym = (&a - a.transpose()).amax();
    if !(asym <= 1e-10 * (1.0 + a.amax())) {
        return Err(FlowError::NotSpd(format!("asymmetry {asym:e}")));
    }
    Ok((&a + a.transpose()) * 0.5)
}

pub fn gaussian_ot_reference(mean: &[f64], cov: &[f64]) -> Result<GaussianOtReference> {
    let d = mean.len();
    let a = symmetric(cov, d)?;
    let eig = a.clone().symmetric_eigen();
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if !(min > 0.0) {
            return Err(FlowError::NotSpd(format!("minimum eigenvalue {min:e}")));
        }
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let w2_sq = DVector::from_column_slice(mean).norm_squared() + a.trace() + d as f64 - 2.0 * tr_sqrt;
    Ok(GaussianOtReference { w2_sq, dim: d })
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let r = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&r) * eig.eigenvectors.transpose()
}

/// Lower bound on the squared 2-Wasserstein distance between any two laws
/// with the given first and second moments:
/// `|m1 - m2|^2 + tr(s1 + s2 - 2 (s1^{1/2} s2 s1^{1/2})^{1/2})`.
/// Equality holds for Gaussians.
pub fn gelbrich_bound(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d {
        return Err(FlowError::Dimension {
            expected: d,
            got: m2.len(),
        });
    }
    let a = symmetric(s1, d)?;
    let b = symmetric(s2, d)?;
    let ra = psd_sqrt(&a);
    let mid = &ra * &b * &ra;
    let cross: f64 = psd_sqrt(&((&mid + mid.transpose()) * 0.5)).trace();
    let mm: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(mm + a.trace() + b.trace() - 2.0 * cross)
}

/// Mean and `1/n`-normalized covariance (row-major) of the rows of `x`.
pub fn sample_moments(x: &crate::autodiff::ArrayValue) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a * d + b] = cov[b * d + a];
        }
    }
    (mean, cov)
}

/// `KL(N(m, s) || N(0, I)) = (tr s + |m|^2 - d - log det s) / 2`.
pub fn kl_to_standard_normal(m: &[f64], s: &[f64]) -> Result<f64> {
    let d = m.len();
    let a = symmetric(s, d)?;
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| FlowError::NotSpd("Cholesky factorization failed".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let mm: f64 = m.iter().map(|x| x * x).sum();
    Ok(0.5 * (a.trace() + mm - d as f64 - logdet))
}
