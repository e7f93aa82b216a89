//! Random matrices shared by unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::ArrayValue;
use crate::rng::rng_from;

/// Sum of `dof` outer products of standard normal vectors.
pub fn wishart(d: usize, dof: usize, seed: u64) -> ArrayValue {
    let mut rng = rng_from(seed);
    let mut a = vec![0.0; d * d];
    for _ in 0..dof {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] += g[i] * g[j];
            }
        }
    }
    ArrayValue::matrix(d, d, a)
}

/// `Q diag(lambda) Q^T` with eigenvalues uniform in `[lo, hi]` and a random
/// orthogonal `Q`.
pub fn random_spd(d: usize, lo: f64, hi: f64, seed: u64) -> ArrayValue {
    let mut rng = rng_from(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let lam: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| q[(i, k)] * lam[k] * q[(j, k)]).sum();
        }
    }
    ArrayValue::matrix(d, d, a)
}
