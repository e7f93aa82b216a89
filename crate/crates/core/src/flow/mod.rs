//! Convex potential flows.
//!
//! A [`FlowLayer`] maps `x` to `f(x) = grad F(x)` for a strongly convex ICNN
//! potential `F`. A [`FlowStack`] composes blocks of an optional per-dimension
//! affine normalization followed by a flow layer, mapping data to a standard
//! normal base. Densities use `log p(x) = log N(z) + sum log det J`, where each
//! layer Jacobian is the SPD Hessian of its potential.

mod grid;
mod layer;
mod ot;
mod stack;

pub use grid::{density_grid, potential_grid, trapezoid_integral, DensityGrid, GridSpec};
pub use layer::{
    exact_logdet_terms, hessians, slq_logdet_terms, surrogate_gradient, surrogate_logdet, FlowLayer, InverseOptions,
    SurrogateTerm,
};
pub use ot::{gaussian_ot_reference, gelbrich_bound, kl_to_standard_normal, sample_moments, GaussianOtReference};
pub use stack::{AffineNorm, BoundBlock, BoundStack, FlowBlock, FlowStack, LogDensityResult, LogDetMode, TrainingLoss};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::icnn::IcnnError;
use crate::solvers::SolverError;

/// Exact log-determinants assemble dense Hessians and are limited to this dimension.
pub const MAX_EXACT_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Icnn(#[from] IcnnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("layer {layer}: {source}")]
    Solver {
        layer: usize,
        #[source]
        source: SolverError,
    },
    #[error("layer {layer}: inversion failed with residual |f(x) - y|_inf = {residual:e}")]
    Inversion { layer: usize, residual: f64 },
    #[error("layer {layer}: Hessian is not positive definite ({detail})")]
    Indefinite { layer: usize, detail: String },
    #[error("exact log-determinant needs dimension <= {MAX_EXACT_DIM}, got {0}")]
    ExactTooLarge(usize),
    #[error("expected {expected} columns, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn solver_err(layer: usize) -> impl Fn(SolverError) -> FlowError {
    move |e| match e {
        SolverError::Indefinite(detail) => FlowError::Indefinite { layer, detail },
        source => FlowError::Solver { layer, source },
    }
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_logpdf(z: &crate::autodiff::ArrayValue) -> Vec<f64> {
    let d = z.cols() as f64;
    let c = -0.5 * d * (2.0 * std::f64::consts::PI).ln();
    (0..z.rows())
        .map(|i| c - 0.5 * z.row(i).iter().map(|v| v * v).sum::<f64>())
        .collect()
}
