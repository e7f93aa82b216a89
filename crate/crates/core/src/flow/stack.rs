use rand_distr::{Distribution, StandardNormal};

use super::layer::{exact_logdet_at, slq_logdet_at, surrogate_logdet};
use super::{standard_normal_logpdf, FlowError, FlowLayer, InverseOptions, Result};
use crate::autodiff::{ArrayValue, Graph, NodeId};
use crate::icnn::{self, BoundParams, IcnnConfig, IcnnError};
use crate::rng::{derive_seed, rng_for};
use crate::solvers::SolverReport;

/// Per-dimension affine map `y = x exp(log_scale) + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNorm {
    pub initialized: bool,
    pub log_scale: ArrayValue,
    pub shift: ArrayValue,
}

impl AffineNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            initialized: false,
            log_scale: ArrayValue::zeros(&[d]),
            shift: ArrayValue::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &ArrayValue) -> ArrayValue {
        let d = x.cols();
        let (ls, sh) = (self.log_scale.data(), self.shift.data());
        let mut y = x.clone();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = *v * ls[j].exp() + sh[j];
        }
        y
    }

    pub fn inverse(&self, y: &ArrayValue) -> ArrayValue {
        let d = y.cols();
        let (ls, sh) = (self.log_scale.data(), self.shift.data());
        let mut x = y.clone();
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - sh[j]) * (-ls[j]).exp();
        }
        x
    }

    /// `log |det|` of the map, the same for every sample.
    pub fn logdet(&self) -> f64 {
        self.log_scale.data().iter().sum()
    }

    /// Sets the map to standardize `x` per dimension (population variance).
    /// Zero-variance dimensions keep unit scale.
    pub fn data_init(&mut self, x: &ArrayValue) {
        let (m, d) = (x.rows(), x.cols());
        let mut ls = vec![0.0; d];
        let mut sh = vec![0.0; d];
        for j in 0..d {
            let mean = (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64;
            let var = (0..m).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / m as f64;
            let std = var.sqrt();
            if std > 1e-12 * (1.0 + mean.abs()) {
                ls[j] = -std.ln();
                sh[j] = -mean / std;
            } else {
                sh[j] = -mean;
            }
        }
        self.log_scale = ArrayValue::vector(ls);
        self.shift = ArrayValue::vector(sh);
        self.initialized = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBlock {
    pub actnorm: Option<AffineNorm>,
    pub layer: FlowLayer,
}

/// Data-to-base composition of blocks; the base is `N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    dim: usize,
    pub blocks: Vec<FlowBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogDetMode {
    Exact,
    Slq { steps: usize, probes: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct LogDensityResult {
    pub logp: Vec<f64>,
    /// `logdet_terms[k][i]`: log-determinant of layer `k` at sample `i`.
    pub logdet_terms: Vec<Vec<f64>>,
    /// Sum of the affine normalizations' log-scales.
    pub affine_logdet: f64,
    /// Base-space image of the input.
    pub output: ArrayValue,
    pub estimator: LogDetMode,
    pub reports: Vec<SolverReport>,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    /// `(log_scale, shift)`.
    pub actnorm: Option<(NodeId, NodeId)>,
    pub potential: BoundParams,
}

#[derive(Clone, Debug)]
pub struct BoundStack {
    pub blocks: Vec<BoundBlock>,
}

impl BoundStack {
    /// Node ids in the order of [`FlowStack::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if let Some((ls, sh)) = b.actnorm {
                out.push(ls);
                out.push(sh);
            }
            out.extend(b.potential.ids());
        }
        out
    }
}

/// Output of [`FlowStack::nll_training_loss`].
#[derive(Clone, Debug)]
pub struct TrainingLoss {
    /// Batch-summed surrogate negative log-likelihood.
    pub loss: NodeId,
    /// Base-space image of the batch.
    pub output: NodeId,
    /// One CG report per layer.
    pub reports: Vec<SolverReport>,
}

impl FlowStack {
    /// A stack with no blocks: the identity map onto the base.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            blocks: Vec::new(),
        }
    }

    pub fn new(config: &IcnnConfig, n_blocks: usize, actnorm: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let blocks = (0..n_blocks)
            .map(|k| {
                Ok(FlowBlock {
                    actnorm: actnorm.then(|| AffineNorm::identity(d)),
                    layer: FlowLayer::new(config.clone(), derive_seed(seed, &[k as u64]))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim: d, blocks })
    }

    pub fn from_blocks(dim: usize, blocks: Vec<FlowBlock>) -> Result<Self> {
        for b in &blocks {
            if b.layer.dim() != dim {
                return Err(FlowError::Dimension {
                    expected: dim,
                    got: b.layer.dim(),
                });
            }
        }
        Ok(Self { dim, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, x: &ArrayValue) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.dim {
            return Err(FlowError::Dimension {
                expected: self.dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.actnorm.as_ref().is_none_or(|a| a.initialized) && b.layer.params.actnorm_initialized())
    }

    /// Marks every normalization as initialized without touching its values.
    pub fn mark_initialized(&mut self) {
        for b in &mut self.blocks {
            if let Some(a) = &mut b.actnorm {
                a.initialized = true;
            }
            b.layer.params.set_actnorm_initialized(true);
        }
    }

    /// Data-dependent initialization of every normalization, block by block,
    /// on the images of `x`. Already initialized parts are kept.
    pub fn initialize(&mut self, x: &ArrayValue) -> Result<()> {
        self.check(x)?;
        if x.rows() < 2 {
            return Err(IcnnError::InitBatchTooSmall(x.rows()).into());
        }
        let mut h = x.clone();
        for b in &mut self.blocks {
            if let Some(a) = &mut b.actnorm {
                if !a.initialized {
                    a.data_init(&h);
                }
                h = a.forward(&h);
            }
            icnn::actnorm_data_init(&mut b.layer.params, &b.layer.config, &h)?;
            h = b.layer.forward(&h)?;
        }
        Ok(())
    }

    /// Named arrays in canonical order.
    pub fn tensors(&self) -> Vec<(String, &ArrayValue)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let k = i + 1;
            if let Some(a) = &b.actnorm {
                out.push((format!("block{k}.actnorm.logscale"), &a.log_scale));
                out.push((format!("block{k}.actnorm.shift"), &a.shift));
            }
            for (n, t) in b.layer.params.tensors() {
                out.push((format!("block{k}.{n}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut ArrayValue)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let k = i + 1;
            if let Some(a) = &mut b.actnorm {
                out.push((format!("block{k}.actnorm.logscale"), &mut a.log_scale));
                out.push((format!("block{k}.actnorm.shift"), &mut a.shift));
            }
            for (n, t) in b.layer.params.tensors_mut() {
                out.push((format!("block{k}.{n}"), t));
            }
        }
        out
    }

    /// Restores positivity constraints after an unconstrained update.
    pub fn project(&mut self) {
        for b in &mut self.blocks {
            b.layer.params.clamp_actnorm();
        }
    }

    /// Maps data to the base space.
    pub fn forward(&self, x: &ArrayValue) -> Result<ArrayValue> {
        self.check(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            if let Some(a) = &b.actnorm {
                h = a.forward(&h);
            }
            h = b.layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Maps base-space points back to data space; one L-BFGS report per layer,
    /// in the order the layers are inverted.
    pub fn inverse(&self, z: &ArrayValue, opts: &InverseOptions) -> Result<(ArrayValue, Vec<SolverReport>)> {
        self.check(z)?;
        let mut h = z.clone();
        let mut reports = Vec::with_capacity(self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let (x, rep) = b.layer.inverse_at(&h, opts, k + 1)?;
            reports.push(rep);
            h = match &b.actnorm {
                Some(a) => a.inverse(&x),
                None => x,
            };
        }
        Ok((h, reports))
    }

    /// `log p(x)` by the change of variables, with exact or SLQ layer
    /// log-determinants.
    pub fn log_density(&self, x: &ArrayValue, mode: LogDetMode) -> Result<LogDensityResult> {
        self.check(x)?;
        if mode == LogDetMode::Exact && self.dim > super::MAX_EXACT_DIM {
            return Err(FlowError::ExactTooLarge(self.dim));
        }
        let mut h = x.clone();
        let mut terms = Vec::with_capacity(self.blocks.len());
        let mut reports = Vec::new();
        let mut affine = 0.0;
        for (k, b) in self.blocks.iter().enumerate() {
            if let Some(a) = &b.actnorm {
                h = a.forward(&h);
                affine += a.logdet();
            }
            let t = match mode {
                LogDetMode::Exact => exact_logdet_at(&b.layer, &h, k + 1)?,
                LogDetMode::Slq { steps, probes, seed } => {
                    let seeds: Vec<u64> = (0..probes as u64).map(|p| derive_seed(seed, &[k as u64, p])).collect();
                    let (t, rep) = slq_logdet_at(&b.layer, &h, steps, &seeds, k + 1)?;
                    reports.push(rep);
                    t
                }
            };
            terms.push(t);
            h = b.layer.forward(&h)?;
        }
        let base = standard_normal_logpdf(&h);
        let logp = (0..x.rows())
            .map(|i| base[i] + affine + terms.iter().map(|t| t[i]).sum::<f64>())
            .collect();
        Ok(LogDensityResult {
            logp,
            logdet_terms: terms,
            affine_logdet: affine,
            output: h,
            estimator: mode,
            reports,
        })
    }

    /// Mean squared displacement `E |x - T(x)|^2` of the full stack.
    pub fn transport_cost(&self, x: &ArrayValue) -> Result<f64> {
        let y = self.forward(x)?;
        if x.rows() == 0 {
            return Ok(0.0);
        }
        let total: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(total / x.rows() as f64)
    }

    /// Draws `n` base-normal points and maps them back to data space.
    pub fn sample(&self, n: usize, seed: u64, opts: &InverseOptions) -> Result<ArrayValue> {
        let mut rng = rng_for(seed, &[]);
        let z: Vec<f64> = (0..n * self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(self.inverse(&ArrayValue::matrix(n, self.dim, z), opts)?.0)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundStack {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let actnorm = b.actnorm.as_ref().map(|a| {
                    if trainable {
                        (g.leaf(a.log_scale.clone()), g.leaf(a.shift.clone()))
                    } else {
                        (g.constant(a.log_scale.clone()), g.constant(a.shift.clone()))
                    }
                });
                BoundBlock {
                    actnorm,
                    potential: icnn::bind(g, &b.layer.params, trainable),
                }
            })
            .collect();
        BoundStack { blocks }
    }

    /// Surrogate negative log-likelihood of a batch. Its value is not the
    /// NLL, but its parameter gradient is an unbiased estimate of the NLL
    /// gradient. Sample `i` probes layer `k` with
    /// `derive_seed(sample_seeds[i], [k])`, so the loss is additive over
    /// disjoint batches with fixed per-sample seeds.
    pub fn nll_training_loss(
        &self,
        g: &mut Graph,
        bound: &BoundStack,
        x: &ArrayValue,
        sample_seeds: &[u64],
        cg_atol: f64,
    ) -> Result<TrainingLoss> {
        self.check(x)?;
        let (m, d) = (x.rows(), self.dim);
        let mut h = g.leaf(x.clone());
        let mut logp_terms = Vec::new();
        let mut reports = Vec::new();
        for (k, (b, bb)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            if let Some((ls, sh)) = bb.actnorm {
                let s = g.exp(ls)?;
                let hs = g.mul_row(h, s)?;
                h = g.add_row(hs, sh)?;
                let sum = g.sum_all(ls)?;
                logp_terms.push(g.scale(sum, m as f64)?);
            }
            let seeds: Vec<u64> = sample_seeds.iter().map(|&s| derive_seed(s, &[k as u64])).collect();
            let term = surrogate_logdet(g, &bb.potential, &b.layer.config, h, &seeds, cg_atol, k + 1)?;
            logp_terms.push(term.surrogate);
            reports.push(term.report);
            h = term.output;
        }
        let sq = g.squared_norm(h)?;
        let mut total = g.scale(sq, -0.5)?;
        let c = -0.5 * (m * d) as f64 * (2.0 * std::f64::consts::PI).ln();
        let cn = g.constant(ArrayValue::scalar(c));
        total = g.add(total, cn)?;
        for t in logp_terms {
            total = g.add(total, t)?;
        }
        let loss = g.scale(total, -1.0)?;
        Ok(TrainingLoss {
            loss,
            output: h,
            reports,
        })
    }
}
