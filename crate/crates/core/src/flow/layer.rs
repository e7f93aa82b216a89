use super::{solver_err, FlowError, Result, MAX_EXACT_DIM};
use crate::autodiff::{ArrayValue, Graph, NodeId};
use crate::icnn::{self, BoundParams, IcnnConfig, PotentialParams};
use crate::rng::derive_seed;
use crate::solvers::{
    conjugate_gradient, exact_logdet, lbfgs_minimize, rademacher_block, slq_logdet_batched, FnOperator, LbfgsOptions,
    SolverError, SolverKind, SolverReport,
};

/// Rows per graph when evaluating large batches.
pub(crate) const CHUNK: usize = 256;

/// One gradient-map layer `x -> grad F(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowLayer {
    pub config: IcnnConfig,
    pub params: PotentialParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseOptions {
    pub grad_tol: f64,
    /// Defaults to `500 d`.
    pub max_iter: Option<usize>,
    pub history: usize,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: None,
            history: 10,
        }
    }
}

pub(crate) fn merge_reports(kind: SolverKind, reports: &[SolverReport]) -> SolverReport {
    SolverReport {
        kind,
        iterations: reports.iter().map(|r| r.iterations).max().unwrap_or(0),
        residual_inf: reports.iter().map(|r| r.residual_inf).fold(0.0, f64::max),
        converged: reports.iter().all(|r| r.converged),
        hvp_calls: reports.iter().map(|r| r.hvp_calls).sum(),
    }
}

pub(crate) fn chunks(m: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..m.div_ceil(CHUNK)).map(move |c| c * CHUNK..((c + 1) * CHUNK).min(m))
}

pub(crate) fn rows(x: &ArrayValue, r: std::ops::Range<usize>) -> ArrayValue {
    let d = x.cols();
    ArrayValue::matrix(r.len(), d, x.data()[r.start * d..r.end * d].to_vec())
}

impl FlowLayer {
    pub fn new(config: IcnnConfig, seed: u64) -> Result<Self> {
        let params = icnn::init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn check(&self, x: &ArrayValue) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// `f(x)` for every row, detached from any parameter graph.
    pub fn forward(&self, x: &ArrayValue) -> Result<ArrayValue> {
        self.check(x)?;
        let mut out = Vec::with_capacity(x.len());
        for r in chunks(x.rows()) {
            let y = icnn::grad_map_values(&self.params, &self.config, &rows(x, r))?;
            out.extend_from_slice(y.data());
        }
        Ok(ArrayValue::matrix(x.rows(), self.dim(), out))
    }

    /// Solves `f(x) = y` row-wise by minimizing the batch sum of
    /// `F(x) - y.x` with L-BFGS from `x = y`.
    pub fn inverse(&self, y: &ArrayValue, opts: &InverseOptions) -> Result<(ArrayValue, SolverReport)> {
        self.inverse_at(y, opts, 1)
    }

    pub(crate) fn inverse_at(
        &self,
        y: &ArrayValue,
        opts: &InverseOptions,
        layer: usize,
    ) -> Result<(ArrayValue, SolverReport)> {
        self.check(y)?;
        let d = self.dim();
        let lb = LbfgsOptions {
            history: opts.history,
            grad_tol: opts.grad_tol,
            max_iter: opts.max_iter.unwrap_or(500 * d),
        };
        let mut out = Vec::with_capacity(y.len());
        let mut reports = Vec::new();
        for r in chunks(y.rows()) {
            let yc = rows(y, r);
            let m = yc.rows();
            let objective = |xv: &[f64]| -> std::result::Result<(f64, Vec<f64>), SolverError> {
                let eval = || -> Result<(f64, Vec<f64>)> {
                    let mut g = Graph::new();
                    let p = icnn::bind(&mut g, &self.params, false);
                    let x = g.leaf(ArrayValue::matrix(m, d, xv.to_vec()));
                    let f = icnn::potential(&mut g, &p, &self.config, x)?;
                    let total = g.sum_all(f)?;
                    let grad = g.gradient_values(total, &[x])?.remove(0);
                    let value = g.value(total).item() - xv.iter().zip(yc.data()).map(|(a, b)| a * b).sum::<f64>();
                    let res = grad.data().iter().zip(yc.data()).map(|(a, b)| a - b).collect();
                    Ok((value, res))
                };
                eval().map_err(|e| SolverError::Operator(e.to_string()))
            };
            let (xc, rep) = lbfgs_minimize(objective, yc.data(), &lb).map_err(|e| match e {
                SolverError::Stagnation { grad_inf, .. } => FlowError::Inversion {
                    layer,
                    residual: grad_inf,
                },
                other => solver_err(layer)(other),
            })?;
            out.extend(xc);
            reports.push(rep);
        }
        Ok((
            ArrayValue::matrix(y.rows(), d, out),
            merge_reports(SolverKind::Lbfgs, &reports),
        ))
    }
}

/// Graph holding `x` as a leaf and `y = f(x)` with its backward kept.
fn graph_with_map(layer: &FlowLayer, x: &ArrayValue) -> Result<(Graph, NodeId, NodeId)> {
    let mut g = Graph::new();
    let p = icnn::bind(&mut g, &layer.params, false);
    let xn = g.leaf(x.clone());
    let y = icnn::grad_map(&mut g, &p, &layer.config, xn)?;
    Ok((g, xn, y))
}

/// `H v` for every row of a `[m, d]` block, leaving the graph as it was.
fn batched_hvp(g: &mut Graph, y: NodeId, x: NodeId, v: &[f64]) -> Result<Vec<f64>> {
    let s = g.shape(x).to_vec();
    let mark = g.mark();
    let hv = g.grad_vector_product(y, x, &ArrayValue::matrix(s[0], s[1], v.to_vec()), false)?;
    let out = g.value(hv).data().to_vec();
    g.rewind(mark);
    Ok(out)
}

/// Row-major `d x d` Hessian of the potential at each row of `x`, assembled
/// from `d` batched unit-vector products.
pub fn hessians(layer: &FlowLayer, x: &ArrayValue) -> Result<Vec<ArrayValue>> {
    layer.check(x)?;
    let d = layer.dim();
    let mut out = Vec::with_capacity(x.rows());
    for r in chunks(x.rows()) {
        let xc = rows(x, r);
        let m = xc.rows();
        let (mut g, xn, y) = graph_with_map(layer, &xc)?;
        let mut h = vec![vec![0.0; d * d]; m];
        for j in 0..d {
            let mut e = vec![0.0; m * d];
            for i in 0..m {
                e[i * d + j] = 1.0;
            }
            let col = batched_hvp(&mut g, y, xn, &e)?;
            for i in 0..m {
                for k in 0..d {
                    h[i][k * d + j] = col[i * d + k];
                }
            }
        }
        out.extend(h.into_iter().map(|hi| ArrayValue::matrix(d, d, hi)));
    }
    Ok(out)
}

pub(crate) fn exact_logdet_at(layer: &FlowLayer, x: &ArrayValue, index: usize) -> Result<Vec<f64>> {
    if layer.dim() > MAX_EXACT_DIM {
        return Err(FlowError::ExactTooLarge(layer.dim()));
    }
    hessians(layer, x)?
        .iter()
        .map(|h| exact_logdet(h).map_err(solver_err(index)))
        .collect()
}

/// Per-row `log det H` by Cholesky.
pub fn exact_logdet_terms(layer: &FlowLayer, x: &ArrayValue) -> Result<Vec<f64>> {
    exact_logdet_at(layer, x, 1)
}

pub(crate) fn slq_logdet_at(
    layer: &FlowLayer,
    x: &ArrayValue,
    steps: usize,
    seeds: &[u64],
    index: usize,
) -> Result<(Vec<f64>, SolverReport)> {
    layer.check(x)?;
    let d = layer.dim();
    let mut est = Vec::with_capacity(x.rows());
    let mut reports = Vec::new();
    for (c, r) in chunks(x.rows()).enumerate() {
        let xc = rows(x, r);
        let m = xc.rows();
        let chunk_seeds: Vec<u64> = seeds.iter().map(|&s| derive_seed(s, &[c as u64])).collect();
        let (mut g, xn, y) = graph_with_map(layer, &xc)?;
        let mut failure = None;
        let mut op = FnOperator::new(d, m, |v: &[f64]| {
            batched_hvp(&mut g, y, xn, v).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                SolverError::Operator(msg)
            })
        });
        let res = slq_logdet_batched(&mut op, &chunk_seeds, steps);
        drop(op);
        if let Some(e) = failure {
            return Err(e);
        }
        let (e, rep) = res.map_err(solver_err(index))?;
        est.extend(e);
        reports.push(rep);
    }
    Ok((est, merge_reports(SolverKind::Slq, &reports)))
}

/// Per-row SLQ estimates of `log det H` with one Lanczos run per entry of
/// `seeds`. Probe vectors are distinct across rows.
pub fn slq_logdet_terms(
    layer: &FlowLayer,
    x: &ArrayValue,
    steps: usize,
    seeds: &[u64],
) -> Result<(Vec<f64>, SolverReport)> {
    slq_logdet_at(layer, x, steps, seeds, 1)
}

/// Output of [`surrogate_logdet`].
#[derive(Clone, Debug)]
pub struct SurrogateTerm {
    /// `y = f(x)`, differentiable in `x` and the parameters.
    pub output: NodeId,
    /// Batch sum of `r_i . H_i z_i` with `z_i` the detached CG solution of
    /// `H_i z_i = r_i`. Its parameter gradient is an unbiased estimate of
    /// the gradient of `sum_i log det H_i` (up to the CG tolerance); its value
    /// is not the log-determinant.
    pub surrogate: NodeId,
    pub report: SolverReport,
}

/// Builds the log-determinant surrogate of one layer applied to `x`. Row `i`
/// uses the Rademacher probe seeded by `probe_seeds[i]`. CG runs from zero
/// with at most `d` iterations; non-convergence is only reported, a
/// non-finite residual is an error.
pub fn surrogate_logdet(
    g: &mut Graph,
    bound: &BoundParams,
    config: &IcnnConfig,
    x: NodeId,
    probe_seeds: &[u64],
    cg_atol: f64,
    layer: usize,
) -> Result<SurrogateTerm> {
    let s = g.shape(x).to_vec();
    let (m, d) = (s[0], s[1]);
    if probe_seeds.len() != m {
        return Err(FlowError::Dimension {
            expected: m,
            got: probe_seeds.len(),
        });
    }
    let y = icnn::grad_map(g, bound, config, x)?;
    let r = rademacher_block(probe_seeds, d);
    let mut failure = None;
    let mut op = FnOperator::new(d, m, |v: &[f64]| {
        batched_hvp(g, y, x, v).map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            SolverError::Operator(msg)
        })
    });
    let res = conjugate_gradient(&mut op, &r, cg_atol, None);
    drop(op);
    if let Some(e) = failure {
        return Err(e);
    }
    let (z, report) = res.map_err(solver_err(layer))?;
    let hz = g.grad_vector_product(y, x, &ArrayValue::matrix(m, d, z), true)?;
    let rn = g.constant(ArrayValue::matrix(m, d, r));
    let surrogate = g.dot(hz, rn)?;
    Ok(SurrogateTerm {
        output: y,
        surrogate,
        report,
    })
}

/// Parameter gradient (in tensor order) of a single layer's surrogate at the
/// rows of `x`.
pub fn surrogate_gradient(
    layer: &FlowLayer,
    x: &ArrayValue,
    probe_seeds: &[u64],
    cg_atol: f64,
) -> Result<(Vec<ArrayValue>, SolverReport)> {
    layer.check(x)?;
    let mut g = Graph::new();
    let p = icnn::bind(&mut g, &layer.params, true);
    let xn = g.leaf(x.clone());
    let term = surrogate_logdet(&mut g, &p, &layer.config, xn, probe_seeds, cg_atol, 1)?;
    let grads = g.gradient_values(term.surrogate, &p.ids())?;
    Ok((grads, term.report))
}
