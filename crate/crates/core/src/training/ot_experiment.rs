//! Transport-cost versus divergence curve on Gaussian data.
//!
//! A single convex-potential block is fit by maximum likelihood to samples of
//! `N(mu, Sigma)`. As the pushforward approaches the standard normal its
//! transport cost approaches the closed-form squared 2-Wasserstein distance.

use std::fmt::Write as _;

use super::{generate_gaussian_ot, GaussianTruth, Result, TrainConfig, Trainer};
use crate::activations::{ActivationKind, Base, Variant};
use crate::flow::{gaussian_ot_reference, gelbrich_bound, kl_to_standard_normal, sample_moments};

/// Defaults follow the Gaussian transport protocol: `d = 8`, 50k samples,
/// batch 128, two epochs, 5 x 64 network. The protocol leaves the learning
/// rate open; 0.02 reaches the low-divergence regime within two epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct OtExperimentConfig {
    pub dim: usize,
    pub n_samples: usize,
    /// Held-out samples used for every logged statistic.
    pub eval_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_hidden_layers: usize,
    pub n_hidden_units: usize,
    pub cg_atol: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for OtExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            n_samples: 50_000,
            eval_samples: 10_000,
            epochs: 2,
            batch_size: 128,
            learning_rate: 0.02,
            n_hidden_layers: 5,
            n_hidden_units: 64,
            cg_atol: 1e-3,
            log_every: 20,
            seed: 0,
        }
    }
}

impl OtExperimentConfig {
    /// One block, zero-offset Gaussian softplus, no outer normalization.
    pub fn train_config(&self) -> TrainConfig {
        let act = ActivationKind::with_variant(Base::Gaussian, Variant::Offset);
        TrainConfig {
            n_flows: 1,
            n_hidden_layers: self.n_hidden_layers,
            n_hidden_units: self.n_hidden_units,
            augmented: true,
            activation_first: act,
            activation_rest: act,
            actnorm: false,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            cg_atol: self.cg_atol,
            seed: self.seed,
            log_every: self.log_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtRow {
    pub step: u64,
    /// KL of the moment-matched Gaussian of the pushforward from `N(0, I)`.
    pub kl: f64,
    /// Held-out mean of `|x - T(x)|^2`.
    pub transport_cost: f64,
    /// Standard error of `transport_cost`.
    pub cost_se: f64,
    pub w2sq_reference: f64,
    /// Moment lower bound on the squared distance between the held-out
    /// sample and its pushforward; never above `transport_cost`.
    pub gelbrich_bound: f64,
}

pub const OT_HEADER: &str = "step,kl,transport_cost,w2sq_reference";
pub const OT_DIAGNOSTICS_HEADER: &str = "step,kl,transport_cost,w2sq_reference,cost_se,gelbrich_bound";

#[derive(Clone, Debug)]
pub struct OtExperimentResult {
    pub rows: Vec<OtRow>,
    pub truth: GaussianTruth,
    pub w2sq_reference: f64,
    pub trainer: Trainer,
}

impl OtExperimentResult {
    /// The curve: one row per log with [`OT_HEADER`] columns.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{OT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.step, r.kl, r.transport_cost, r.w2sq_reference);
        }
        s
    }

    /// The curve plus the cost standard error and the moment lower bound.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = format!("{OT_DIAGNOSTICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?}",
                r.step, r.kl, r.transport_cost, r.w2sq_reference, r.cost_se, r.gelbrich_bound
            );
        }
        s
    }

    /// Spearman correlation between KL and `|cost - W2^2|` over the logged rows.
    pub fn monotonicity(&self) -> f64 {
        let kl: Vec<f64> = self.rows.iter().map(|r| r.kl).collect();
        let gap: Vec<f64> = self
            .rows
            .iter()
            .map(|r| (r.transport_cost - r.w2sq_reference).abs())
            .collect();
        spearman(&kl, &gap)
    }
}

fn ot_row(trainer: &Trainer, eval: &crate::autodiff::ArrayValue, w2: f64) -> Result<OtRow> {
    let y = trainer.stack.forward(eval)?;
    let n = eval.rows() as f64;
    let per: Vec<f64> = (0..eval.rows())
        .map(|i| eval.row(i).iter().zip(y.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let cost = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|c| (c - cost).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let (mx, sx) = sample_moments(eval);
    let (my, sy) = sample_moments(&y);
    Ok(OtRow {
        step: trainer.step,
        kl: kl_to_standard_normal(&my, &sy)?,
        transport_cost: cost,
        cost_se: (var / n).sqrt(),
        w2sq_reference: w2,
        gelbrich_bound: gelbrich_bound(&mx, &sx, &my, &sy)?,
    })
}

/// Runs the experiment, logging a row at step 0, every `log_every` steps
/// and at the end.
pub fn run_ot_experiment(cfg: &OtExperimentConfig) -> Result<OtExperimentResult> {
    let (train, truth) = generate_gaussian_ot(cfg.dim, cfg.n_samples + cfg.eval_samples, cfg.seed)?;
    let eval = train.select_rows(&(cfg.n_samples..cfg.n_samples + cfg.eval_samples).collect::<Vec<_>>());
    let train = train.select_rows(&(0..cfg.n_samples).collect::<Vec<_>>());
    let w2 = gaussian_ot_reference(&truth.mean, &truth.cov)?.w2_sq;
    let mut trainer = Trainer::new(cfg.train_config(), cfg.dim)?;
    trainer
        .stack
        .initialize(&train.select_rows(&(0..cfg.batch_size.min(cfg.n_samples)).collect::<Vec<_>>()))?;
    let total = trainer.total_steps(train.rows());
    let mut rows = vec![ot_row(&trainer, &eval, w2)?];
    while trainer.step < total {
        trainer.step_once(&train)?;
        if trainer.step % cfg.log_every as u64 == 0 || trainer.step == total {
            rows.push(ot_row(&trainer, &eval, w2)?);
        }
    }
    Ok(OtExperimentResult {
        rows,
        truth,
        w2sq_reference: w2,
        trainer,
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // ties share their average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]) + 1.0).abs() < 1e-15);
        // monotone transforms do not change ranks
        assert!((spearman(&[0.1, 5.0, 2.0, 3.0], &[0.01, 25.0, 4.0, 9.0]) - 1.0).abs() < 1e-15);
        // classic example with ties: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let rho = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((rho - 0.866_025_403_784_438_6).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn short_run_respects_the_moment_bound() {
        let cfg = OtExperimentConfig {
            dim: 3,
            n_samples: 512,
            eval_samples: 256,
            epochs: 1,
            n_hidden_layers: 2,
            n_hidden_units: 8,
            log_every: 2,
            ..OtExperimentConfig::default()
        };
        let res = run_ot_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1 + 2);
        for r in &res.rows {
            assert!(r.gelbrich_bound <= r.transport_cost + 1e-9, "{r:?}");
            assert!(r.kl >= 0.0);
        }
        assert!(res.to_csv().starts_with(OT_HEADER));
        assert_eq!(res.diagnostics_csv().lines().count(), res.rows.len() + 1);
    }
}
