//! Matrix-free numerical routines.
//!
//! Operators are applied to a *batch* of independent systems at once: a
//! [`LinearOperator`] with `batch() = n` maps an `n x d` row-major block to
//! another, row `i` only depending on row `i`. Conjugate gradient and Lanczos
//! keep separate scalar recurrences per row, so a batch behaves exactly like
//! `n` separate solves sharing operator calls.

mod cg;
mod dense;
mod lanczos;
mod lbfgs;
mod probe;

pub use cg::conjugate_gradient;
pub use dense::{cholesky, exact_logdet, matvec};
pub use lanczos::{slq_logdet, slq_logdet_batched, slq_logdet_with_seeds, tridiagonal_eigen};
pub use lbfgs::{lbfgs_minimize, LbfgsOptions};
pub use probe::{hutchinson_probe, rademacher_block};

use std::fmt;

use thiserror::Error;

use crate::autodiff::ArrayValue;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("numerical breakdown at iteration {iteration}: {reason}")]
    Breakdown { iteration: usize, reason: String },
    #[error("matrix is not positive definite: {0}")]
    Indefinite(String),
    #[error("line search stagnated at iteration {iteration} after {shrinks} shrinks (|grad|_inf = {grad_inf:e})")]
    Stagnation {
        iteration: usize,
        shrinks: usize,
        grad_inf: f64,
        best: Vec<f64>,
    },
    #[error("operator evaluation failed: {0}")]
    Operator(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tridiagonal eigensolver did not converge")]
    NoConvergence,
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// A linear map applied to `batch()` independent `dim()`-vectors at once.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    fn batch(&self) -> usize {
        1
    }

    /// Applies the operator to a row-major `batch x dim` block.
    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Dense symmetric matrix as an operator.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    matrix: ArrayValue,
}

impl DenseOperator {
    pub fn new(matrix: ArrayValue) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(SolverError::InvalidArgument(format!(
                "expected a square matrix, got shape {s:?}"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &ArrayValue {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(SolverError::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(matvec(&self.matrix, v))
    }
}

/// Closure-backed operator.
pub struct FnOperator<F> {
    dim: usize,
    batch: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    pub fn new(dim: usize, batch: usize, f: F) -> Self {
        Self { dim, batch, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn batch(&self) -> usize {
        self.batch
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        (self.f)(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    ConjugateGradient,
    Lbfgs,
    Slq,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::ConjugateGradient => "cg",
            SolverKind::Lbfgs => "lbfgs",
            SolverKind::Slq => "slq",
        })
    }
}

/// Outcome of one solver call. For batched calls `iterations` and
/// `residual_inf` are maxima over the batch and `converged` holds for all rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverReport {
    pub kind: SolverKind,
    pub iterations: usize,
    pub residual_inf: f64,
    pub converged: bool,
    /// Operator (or objective) evaluations.
    pub hvp_calls: usize,
}

impl SolverReport {
    pub const CSV_HEADER: &'static str = "call_type,iterations,hvp_calls,residual_inf,converged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{}",
            self.kind, self.iterations, self.hvp_calls, self.residual_inf, self.converged
        )
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
