use std::collections::VecDeque;

use super::{dot, inf_norm, Result, SolverError, SolverKind, SolverReport};

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub history: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            history: 10,
            grad_tol: 1e-6,
            max_iter: 500,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_SHRINKS: usize = 50;

/// Minimizes `objective` (returning value and gradient) from `x0` with the
/// two-loop L-BFGS recursion and backtracking Armijo line search.
///
/// Stops when `||grad||_inf <= grad_tol`; reaching `max_iter` returns the last
/// iterate with `converged = false`.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], opts: &LbfgsOptions) -> Result<(Vec<f64>, SolverReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if opts.history == 0 {
        return Err(SolverError::InvalidArgument("history must be at least 1".into()));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    let mut calls = 1;
    if g.len() != n {
        return Err(SolverError::Dimension {
            expected: n,
            got: g.len(),
        });
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::Breakdown {
            iteration: 0,
            reason: "non-finite objective at the starting point".into(),
        });
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut iter = 0;
    let report = |iter, g: &[f64], converged, calls| SolverReport {
        kind: SolverKind::Lbfgs,
        iterations: iter,
        residual_inf: inf_norm(g),
        converged,
        hvp_calls: calls,
    };

    loop {
        if inf_norm(&g) <= opts.grad_tol {
            return Ok((x, report(iter, &g, true, calls)));
        }
        if iter >= opts.max_iter {
            return Ok((x, report(iter, &g, false, calls)));
        }

        let mut dir = two_loop(&g, &mem);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) || !slope.is_finite() {
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        // near the optimum, rounding in batch-summed values can hide a real
        // decrease; accept a value within a few ulps if the gradient shrinks
        let slack = 16.0 * f64::EPSILON * (1.0 + f.abs());
        let g_inf = inf_norm(&g);
        let mut t = 1.0;
        let mut shrinks = 0;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let (fc, gc) = objective(&cand)?;
            calls += 1;
            if fc.is_finite()
                && gc.iter().all(|v| v.is_finite())
                && (fc <= f + ARMIJO_C * t * slope || (fc <= f + slack && inf_norm(&gc) < g_inf))
            {
                break (cand, fc, gc);
            }
            shrinks += 1;
            if shrinks > MAX_SHRINKS {
                return Err(SolverError::Stagnation {
                    iteration: iter,
                    shrinks: MAX_SHRINKS,
                    grad_inf: g_inf,
                    best: x,
                });
            }
            t *= SHRINK;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if mem.len() == opts.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        iter += 1;
    }
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}
