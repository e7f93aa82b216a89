use super::{Result, SolverError};
use crate::autodiff::ArrayValue;

/// `A v` for a square row-major matrix.
pub fn matvec(a: &ArrayValue, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// Lower Cholesky factor of a symmetric positive definite matrix, row-major.
pub fn cholesky(a: &ArrayValue) -> Result<Vec<f64>> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(SolverError::InvalidArgument(format!(
            "cholesky needs a square matrix, got shape {s:?}"
        )));
    }
    let n = s[0];
    let m = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = m[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(SolverError::Indefinite(format!("pivot {j} is {diag:e}")));
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut x = m[i * n + j];
            for k in 0..j {
                x -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = x / ljj;
        }
    }
    Ok(l)
}

/// `log det A = 2 sum log L_ii` via Cholesky.
pub fn exact_logdet(a: &ArrayValue) -> Result<f64> {
    let n = a.rows();
    let l = cholesky(a)?;
    Ok(2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>())
}
