use super::{dot, inf_norm, LinearOperator, Result, SolverError, SolverKind, SolverReport};

/// Conjugate gradient for `H z = rhs`, started from `z = 0`.
///
/// `rhs` is a `batch x dim` block; every row runs its own recurrence and
/// freezes once `||r||_inf < atol`. Rows that never meet the rule return their
/// `max_iter`-th iterate and the report has `converged = false`. `max_iter`
/// defaults to `dim`.
pub fn conjugate_gradient(
    op: &mut dyn LinearOperator,
    rhs: &[f64],
    atol: f64,
    max_iter: Option<usize>,
) -> Result<(Vec<f64>, SolverReport)> {
    let d = op.dim();
    let n = op.batch();
    if rhs.len() != n * d {
        return Err(SolverError::Dimension {
            expected: n * d,
            got: rhs.len(),
        });
    }
    if !(atol > 0.0) {
        return Err(SolverError::InvalidArgument(format!(
            "atol must be positive, got {atol}"
        )));
    }
    let max_iter = max_iter.unwrap_or(d);
    if max_iter == 0 {
        return Err(SolverError::InvalidArgument("max_iter must be at least 1".into()));
    }

    let mut z = vec![0.0; n * d];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr: Vec<f64> = r.chunks(d).map(|ri| dot(ri, ri)).collect();
    let mut res: Vec<f64> = r.chunks(d).map(inf_norm).collect();
    if res.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::Breakdown {
            iteration: 0,
            reason: "non-finite right-hand side".into(),
        });
    }
    let mut active: Vec<bool> = res.iter().map(|&x| x >= atol).collect();
    let mut iters = vec![0usize; n];
    let mut calls = 0;

    for k in 1..=max_iter {
        if !active.iter().any(|&a| a) {
            break;
        }
        for i in 0..n {
            if !active[i] {
                p[i * d..(i + 1) * d].fill(0.0);
            }
        }
        let ap = op.apply(&p)?;
        calls += 1;
        if ap.len() != n * d {
            return Err(SolverError::Dimension {
                expected: n * d,
                got: ap.len(),
            });
        }
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let rows = i * d..(i + 1) * d;
            let (pi, api) = (&p[rows.clone()], &ap[rows.clone()]);
            let pap = dot(pi, api);
            if !(pap > 0.0) || !pap.is_finite() {
                return Err(SolverError::Breakdown {
                    iteration: k,
                    reason: format!("curvature p'Hp = {pap:e} in system {i}"),
                });
            }
            let alpha = rr[i] / pap;
            for j in rows.clone() {
                z[j] += alpha * p[j];
                r[j] -= alpha * ap[j];
            }
            iters[i] = k;
            let ri = &r[rows.clone()];
            res[i] = inf_norm(ri);
            if !res[i].is_finite() {
                return Err(SolverError::Breakdown {
                    iteration: k,
                    reason: format!("non-finite residual in system {i}"),
                });
            }
            if res[i] < atol {
                active[i] = false;
                continue;
            }
            let rr_new = dot(ri, ri);
            let beta = rr_new / rr[i];
            rr[i] = rr_new;
            for j in rows {
                p[j] = r[j] + beta * p[j];
            }
        }
    }

    let report = SolverReport {
        kind: SolverKind::ConjugateGradient,
        iterations: iters.iter().copied().max().unwrap_or(0),
        residual_inf: res.iter().copied().fold(0.0, f64::max),
        converged: !active.iter().any(|&a| a),
        hvp_calls: calls,
    };
    Ok((z, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ArrayValue;
    use crate::solvers::{matvec, DenseOperator, FnOperator};
    use crate::testutil::{random_spd, wishart};

    fn solve(a: &ArrayValue, v: &[f64], atol: f64, max_iter: Option<usize>) -> (Vec<f64>, SolverReport) {
        let mut op = DenseOperator::new(a.clone()).unwrap();
        conjugate_gradient(&mut op, v, atol, max_iter).unwrap()
    }

    #[test]
    fn identity_one_iteration() {
        let d = 7;
        let mut op = FnOperator::new(d, 1, |v: &[f64]| Ok(v.to_vec()));
        let v: Vec<f64> = (0..d).map(|i| i as f64 - 2.5).collect();
        let (z, rep) = conjugate_gradient(&mut op, &v, 1e-12, None).unwrap();
        assert_eq!(z, v);
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
    }

    #[test]
    fn two_by_two_example() {
        let a = ArrayValue::matrix(2, 2, vec![4.0, 1.0, 1.0, 3.0]);
        let (z, rep) = solve(&a, &[1.0, 2.0], 1e-12, None);
        assert!((z[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((z[1] - 7.0 / 11.0).abs() < 1e-12);
        assert!(rep.iterations <= 2 && rep.converged);
    }

    #[test]
    fn wishart_43_terminates_within_dim() {
        let mut a = wishart(43, 86, 9);
        a.data_mut().iter_mut().for_each(|x| *x /= 43.0);
        let v: Vec<f64> = (0..43).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let (z, rep) = solve(&a, &v, 1e-7, None);
        assert!(rep.converged, "{rep:?}");
        assert!(rep.iterations <= 43);
        assert!(rep.residual_inf < 1e-7);
        assert!(rep.hvp_calls >= rep.iterations);
        let hz = matvec(&a, &z);
        let true_res = hz.iter().zip(&v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(true_res < 1e-6);
    }

    fn h_norm_err(a: &ArrayValue, z: &[f64], zs: &[f64]) -> f64 {
        let e: Vec<f64> = z.iter().zip(zs).map(|(x, y)| x - y).collect();
        dot(&e, &matvec(a, &e)).sqrt()
    }

    #[test]
    fn h_norm_error_is_monotone_and_decays() {
        let d = 30;
        let a = random_spd(d, 1.0, 50.0, 4);
        let v: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let zs = nalgebra::DMatrix::from_row_slice(d, d, a.data())
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_vec(v.clone()));
        let zs: Vec<f64> = zs.iter().copied().collect();
        let mut errs = vec![h_norm_err(&a, &vec![0.0; d], &zs)];
        for m in 1..=15 {
            let (z, _) = solve(&a, &v, 1e-300, Some(m));
            errs.push(h_norm_err(&a, &z, &zs));
        }
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10), "{errs:?}");
        }
        // least-squares slope of log error against iteration count
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let n = ys.len() as f64;
        let xm = (n - 1.0) / 2.0;
        let ym = ys.iter().sum::<f64>() / n;
        let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
        let den: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
        assert!(num / den < 0.0);
    }

    #[test]
    fn stopping_rule_is_respected() {
        let a = random_spd(20, 1.0, 100.0, 2);
        let v = vec![1.0; 20];
        for atol in [1e-2, 1e-5, 1e-9] {
            let (_, rep) = solve(&a, &v, atol, None);
            assert!(rep.converged);
            assert!(rep.residual_inf < atol);
        }
    }

    #[test]
    fn batch_rows_match_separate_solves() {
        let d = 6;
        let mats: Vec<ArrayValue> = (0..3).map(|s| random_spd(d, 1.0, 30.0, 10 + s)).collect();
        let rhs: Vec<f64> = (0..3 * d).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let m2 = mats.clone();
        let mut op = FnOperator::new(d, 3, move |v: &[f64]| {
            Ok(v.chunks(d).zip(&m2).flat_map(|(vi, a)| matvec(a, vi)).collect())
        });
        let (z, rep) = conjugate_gradient(&mut op, &rhs, 1e-9, None).unwrap();
        let mut max_it = 0;
        for (i, a) in mats.iter().enumerate() {
            let (zi, ri) = solve(a, &rhs[i * d..(i + 1) * d], 1e-9, None);
            assert_eq!(&z[i * d..(i + 1) * d], zi.as_slice());
            max_it = max_it.max(ri.iterations);
        }
        assert_eq!(rep.iterations, max_it);
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        let a = ArrayValue::matrix(2, 2, vec![1.0, 0.0, 0.0, -1.0]);
        let mut op = DenseOperator::new(a).unwrap();
        let err = conjugate_gradient(&mut op, &[0.0, 1.0], 1e-8, None).unwrap_err();
        assert!(matches!(err, SolverError::Breakdown { iteration: 1, .. }));
    }

    #[test]
    fn non_convergence_is_reported() {
        let a = random_spd(10, 1.0, 1000.0, 3);
        let (_, rep) = solve(&a, &[1.0; 10], 1e-12, Some(2));
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 2);
    }
}
