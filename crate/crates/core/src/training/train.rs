//! The minibatch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{clip_global_norm, Adam, Dataset, DatasetKind, Result, TrainConfig, TrainError};
use super::{TAG_INIT, TAG_PROBE, TAG_SHUFFLE, TAG_VALIDATION};
use crate::autodiff::{ArrayValue, Graph};
use crate::flow::{kl_to_standard_normal, sample_moments, FlowStack, LogDetMode, MAX_EXACT_DIM};
use crate::rng::{derive_seed, rng_for};

pub const HISTORY_HEADER: &str = "step,loss_proxy,val_nll,transport_cost,kl_diag,cg_iters_mean";

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    /// Mean per-sample surrogate loss since the previous row. Its gradient,
    /// not its value, matches the negative log-likelihood.
    pub loss_proxy: f64,
    pub val_nll: f64,
    pub transport_cost: f64,
    /// KL of the moment-matched Gaussian of the pushed-forward validation
    /// set from the base; only for `gaussian_ot` data.
    pub kl_diag: Option<f64>,
    /// Mean CG iterations per layer and step since the previous row.
    pub cg_iters_mean: f64,
}

impl HistoryRow {
    pub fn csv_row(&self) -> String {
        let kl = self.kl_diag.map_or(String::new(), |v| format!("{v:?}"));
        format!(
            "{},{:?},{:?},{:?},{kl},{:?}",
            self.step, self.loss_proxy, self.val_nll, self.transport_cost, self.cg_iters_mean
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_proxy: f64,
    pub cg_iters_mean: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Trainer state: everything a checkpoint needs to resume bit-for-bit.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub stack: FlowStack,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let stack = FlowStack::new(
            &config.icnn_config(dim),
            config.n_flows,
            config.actnorm,
            derive_seed(config.seed, &[TAG_INIT]),
        )?;
        Ok(Self::from_parts(config, stack, Adam::new(0.0), 0))
    }

    pub(crate) fn from_parts(config: TrainConfig, stack: FlowStack, mut adam: Adam, step: u64) -> Self {
        adam.lr = config.learning_rate;
        Self {
            config,
            stack,
            adam,
            step,
            order: None,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.steps_per_epoch(n_train) * self.config.epochs as u64
    }

    /// Row order of epoch `epoch`: a seeded permutation.
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(self.config.seed, &[TAG_SHUFFLE, epoch]));
        idx
    }

    /// Dataset row indices of the batch for the current step.
    pub fn batch_indices(&mut self, n_train: usize) -> Result<Vec<usize>> {
        if n_train == 0 {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let spe = self.steps_per_epoch(n_train);
        let (epoch, b) = (self.step / spe, (self.step % spe) as usize);
        if self
            .order
            .as_ref()
            .is_none_or(|(e, o)| *e != epoch || o.len() != n_train)
        {
            self.order = Some((epoch, self.epoch_order(epoch, n_train)));
        }
        let order = &self.order.as_ref().expect("order cached above").1;
        let bs = self.config.batch_size;
        Ok(order[b * bs..((b + 1) * bs).min(n_train)].to_vec())
    }

    /// One optimizer step on the next minibatch of `train`. Normalizations
    /// are data-initialized on the very first batch.
    pub fn step_once(&mut self, train: &ArrayValue) -> Result<StepStats> {
        let idx = self.batch_indices(train.rows())?;
        let x = train.select_rows(&idx);
        if !self.stack.is_initialized() {
            self.stack.initialize(&x)?;
        }
        let seeds: Vec<u64> = idx
            .iter()
            .map(|&i| derive_seed(self.config.seed, &[TAG_PROBE, self.step, i as u64]))
            .collect();
        let m = x.rows() as f64;
        let mut g = Graph::new();
        let bound = self.stack.bind(&mut g, true);
        let loss = self
            .stack
            .nll_training_loss(&mut g, &bound, &x, &seeds, self.config.cg_atol)?;
        let value = g.value(loss.loss).item() / m;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }
        let mut grads = g.gradient_values(loss.loss, &bound.ids())?;
        drop(g);
        for gr in &mut grads {
            gr.data_mut().iter_mut().for_each(|v| *v /= m);
        }
        let grad_norm = match self.config.grad_clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt(),
        };
        {
            let mut tensors = self.stack.tensors_mut();
            let mut params: Vec<&mut ArrayValue> = tensors.iter_mut().map(|(_, t)| &mut **t).collect();
            self.adam.update(&mut params, &grads).map_err(|e| match e {
                TrainError::NonFiniteGradient { tensor, .. } => TrainError::NonFiniteGradient {
                    step: self.step,
                    tensor,
                },
                other => other,
            })?;
        }
        self.stack.project();
        self.step += 1;
        let iters: usize = loss.reports.iter().map(|r| r.iterations).sum();
        Ok(StepStats {
            loss_proxy: value,
            cg_iters_mean: iters as f64 / loss.reports.len().max(1) as f64,
            grad_norm,
        })
    }

    /// Validation NLL (exact log-det up to [`MAX_EXACT_DIM`], SLQ above),
    /// transport cost, and for Gaussian transport data the moment KL.
    pub fn evaluate(&self, val: &ArrayValue, kind: DatasetKind) -> Result<(f64, f64, Option<f64>)> {
        let cap = self.config.val_max_samples;
        let x = if cap > 0 && val.rows() > cap {
            val.select_rows(&(0..cap).collect::<Vec<_>>())
        } else {
            val.clone()
        };
        if x.rows() == 0 {
            return Ok((f64::NAN, f64::NAN, None));
        }
        let mode = if self.stack.dim() <= MAX_EXACT_DIM {
            LogDetMode::Exact
        } else {
            LogDetMode::Slq {
                steps: self.config.slq_steps,
                probes: self.config.slq_probes,
                seed: derive_seed(self.config.seed, &[TAG_VALIDATION, self.step]),
            }
        };
        let res = self.stack.log_density(&x, mode)?;
        let nll = -res.logp.iter().sum::<f64>() / x.rows() as f64;
        let cost = x
            .data()
            .iter()
            .zip(res.output.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.rows() as f64;
        let kl = if kind == DatasetKind::GaussianOt {
            let (m, s) = sample_moments(&res.output);
            Some(kl_to_standard_normal(&m, &s)?)
        } else {
            None
        };
        Ok((nll, cost, kl))
    }

    /// Trains until `epochs` full passes are complete, logging every
    /// `log_every` steps and at the last step. `on_log` sees the trainer
    /// after each logged step; an error from it aborts the run.
    pub fn run(&mut self, data: &Dataset, on_log: impl FnMut(&Trainer, &HistoryRow) -> Result<()>) -> Result<History> {
        let total = self.total_steps(data.train.rows());
        self.run_until(data, total, on_log)
    }

    pub fn run_until(
        &mut self,
        data: &Dataset,
        total: u64,
        mut on_log: impl FnMut(&Trainer, &HistoryRow) -> Result<()>,
    ) -> Result<History> {
        let mut history = History::default();
        let (mut loss_acc, mut cg_acc, mut count) = (0.0, 0.0, 0usize);
        while self.step < total {
            let s = self.step_once(&data.train)?;
            loss_acc += s.loss_proxy;
            cg_acc += s.cg_iters_mean;
            count += 1;
            if self.step % self.config.log_every as u64 == 0 || self.step == total {
                let (val_nll, transport_cost, kl_diag) = self.evaluate(&data.val, data.kind)?;
                let row = HistoryRow {
                    step: self.step,
                    loss_proxy: loss_acc / count as f64,
                    val_nll,
                    transport_cost,
                    kl_diag,
                    cg_iters_mean: cg_acc / count as f64,
                };
                (loss_acc, cg_acc, count) = (0.0, 0.0, 0);
                on_log(self, &row)?;
                history.rows.push(row);
            }
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig {
            n_flows: 2,
            n_hidden_layers: 2,
            n_hidden_units: 8,
            batch_size: 32,
            epochs: 1,
            log_every: 5,
            val_max_samples: 64,
            ..TrainConfig::default()
        }
    }

    fn toy() -> Dataset {
        Dataset::toy(DatasetKind::EightGaussians, 200, 1).unwrap()
    }

    #[test]
    fn zero_epochs_leaves_the_stack_unchanged() {
        let data = toy();
        let mut t = Trainer::new(
            TrainConfig {
                epochs: 0,
                ..small_config()
            },
            2,
        )
        .unwrap();
        let before = t.stack.clone();
        let h = t.run(&data, |_, _| Ok(())).unwrap();
        assert!(h.rows.is_empty());
        assert_eq!(t.step, 0);
        assert_eq!(format!("{:?}", t.stack.tensors()), format!("{:?}", before.tensors()));
    }

    #[test]
    fn training_is_deterministic_and_logs_last_step() {
        let data = toy();
        let run = || {
            let mut t = Trainer::new(small_config(), 2).unwrap();
            let h = t.run(&data, |_, _| Ok(())).unwrap();
            (t, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a.step, 5);
        assert_eq!(ha.rows.last().unwrap().step, 5);
        for ((_, x), (_, y)) in a.stack.tensors().iter().zip(b.stack.tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let csv = ha.to_csv();
        assert!(csv.starts_with(HISTORY_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut t = Trainer::new(small_config(), 2).unwrap();
        let n = 100;
        let mut seen = Vec::new();
        for s in 0..4 {
            t.step = s;
            seen.extend(t.batch_indices(n).unwrap());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        t.step = 4;
        let next_epoch = t.batch_indices(n).unwrap();
        assert_ne!(next_epoch, t.epoch_order(0, n)[..32].to_vec());
    }

    #[test]
    fn first_step_initializes_and_updates() {
        let data = toy();
        let mut t = Trainer::new(small_config(), 2).unwrap();
        assert!(!t.stack.is_initialized());
        let s = t.step_once(&data.train).unwrap();
        assert!(t.stack.is_initialized());
        assert!(s.loss_proxy.is_finite() && s.grad_norm > 0.0);
        assert!(s.cg_iters_mean >= 1.0 && s.cg_iters_mean <= 2.0);
        assert_eq!(t.adam.step, 1);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let data = toy();
        let mut t = Trainer::new(
            TrainConfig {
                grad_clip_norm: Some(1e-3),
                ..small_config()
            },
            2,
        )
        .unwrap();
        t.step_once(&data.train).unwrap();
        assert!(t.step == 1);
    }

    #[test]
    fn training_reduces_validation_nll() {
        let data = Dataset::toy(DatasetKind::OneMoon, 2000, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            log_every: 1000,
            val_max_samples: 200,
            ..small_config()
        };
        let mut t = Trainer::new(cfg, 2).unwrap();
        let mut probe = t.clone();
        probe
            .stack
            .initialize(&data.train.select_rows(&(0..32).collect::<Vec<_>>()))
            .unwrap();
        let (nll0, _, _) = probe.evaluate(&data.val, data.kind).unwrap();
        let h = t.run(&data, |_, _| Ok(())).unwrap();
        let nll1 = h.rows.last().unwrap().val_nll;
        assert!(nll1 < nll0 - 0.2, "{nll0} -> {nll1}");
    }

    #[test]
    fn gaussian_runs_report_kl() {
        let data = Dataset::gaussian_ot(3, 300, 2).unwrap();
        let mut t = Trainer::new(
            TrainConfig {
                epochs: 1,
                ..small_config()
            },
            3,
        )
        .unwrap();
        let h = t.run(&data, |_, _| Ok(())).unwrap();
        assert!(h.rows.iter().all(|r| r.kl_diag.is_some_and(|k| k >= 0.0)));
    }
}
