use rand::Rng;

use crate::rng::rng_from;

/// Rademacher vector: i.i.d. entries in {-1, +1} with probability 1/2 each,
/// drawn from a ChaCha8 stream seeded with `seed`.
pub fn hutchinson_probe(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Row-major `seeds.len() x d` block of Rademacher rows, one seed per row.
pub fn rademacher_block(seeds: &[u64], d: usize) -> Vec<f64> {
    seeds.iter().flat_map(|&s| hutchinson_probe(s, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;

    #[test]
    fn entries_are_signs_and_reproducible() {
        let v = hutchinson_probe(42, 1000);
        assert!(v.iter().all(|&x| x == 1.0 || x == -1.0));
        assert_eq!(v, hutchinson_probe(42, 1000));
        assert_ne!(v, hutchinson_probe(43, 1000));
        let plus = v.iter().filter(|&&x| x > 0.0).count();
        assert!((400..600).contains(&plus));
    }

    fn trace_check(a: &[f64], d: usize, n: usize, seed: u64) {
        let tr: f64 = (0..d).map(|i| a[i * d + i]).sum();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for k in 0..n {
            let v = hutchinson_probe(derive_seed(seed, &[k as u64]), d);
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    q += v[i] * a[i * d + j] * v[j];
                }
            }
            sum += q;
            sum2 += q * q;
        }
        let mean = sum / n as f64;
        let var = (sum2 / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - tr).abs() <= 3.0 * se + 1e-12, "mean {mean} trace {tr} se {se}");
    }

    #[test]
    fn hutchinson_trace_small_example() {
        trace_check(&[4.0, 1.0, 1.0, 3.0], 2, 100_000, 7);
    }

    #[test]
    fn hutchinson_unbiased_random_symmetric() {
        use rand::Rng;
        let mut rng = rng_from(11);
        let d = 8;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let x: f64 = rng.random_range(-1.0..1.0);
                a[i * d + j] = x;
                a[j * d + i] = x;
            }
        }
        trace_check(&a, d, 100_000, 3);
    }
}
