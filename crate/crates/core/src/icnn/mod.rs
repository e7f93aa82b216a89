//! Input-convex potential networks.
//!
//! The potential is
//!
//! ```text
//! F(x) = softplus(w0) |x|^2 / 2 + softplus(w1) G(x)
//! G(x) = v_out+ . h_K + W_out x + b_out
//! h_1 = s_first(N_1(W_1 x + b_1))
//! h_k = s_rest(N_k(V_k+ h_{k-1} + W_k x + b_k))        k >= 2
//! ```
//!
//! where `N_k` is a per-unit ActNorm with positive scale and `M+` denotes the
//! positive reparameterization `softplus(raw) / fan_in`. With `augmented`
//! set, each hidden layer is split in two halves: the first follows the
//! recursion above, the second is `s_first(N(A_k x + b))` and only sees the
//! input. The concatenation of both halves feeds the next layer.
//!
//! Convexity in `x` holds because `s_rest` is convex and nondecreasing, the
//! hidden-path weights and ActNorm scales are positive, and every unit fed
//! by `s_first` (which may be non-monotone) has an argument affine in `x`.


use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::activations::{self, ActivationKind, Base, Variant};
use crate::autodiff::{ArrayValue, AutodiffError, Graph, NodeId};
use crate::rng::rng_for;

/// ActNorm scales are kept at or above this value.
pub const MIN_ACTNORM_SCALE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IcnnError {
    #[error("invalid ICNN configuration: {0}")]
    Config(String),
    #[error("ActNorm of layer {layer} is not initialized")]
    ActNormUninitialized { layer: usize },
    #[error("ActNorm initialization needs at least 2 samples, got {0}")]
    InitBatchTooSmall(usize),
    #[error("input has {got} columns, expected {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, IcnnError>;

#[derive(Clone, Debug, PartialEq)]
pub struct IcnnConfig {
    pub input_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    pub augmented: bool,
    pub activation_first: ActivationKind,
    pub activation_rest: ActivationKind,
}

impl IcnnConfig {
    /// Gaussian softplus everywhere, symmetrized on input-affine units.
    pub fn new(input_dim: usize, depth: usize, width: usize) -> Self {
        Self {
            input_dim,
            depth,
            width,
            augmented: true,
            activation_first: ActivationKind::with_variant(Base::Gaussian, Variant::Symmetrized),
            activation_rest: ActivationKind::plain(Base::Gaussian),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.depth == 0 || self.width == 0 {
            return Err(IcnnError::Config(format!(
                "input_dim, depth and width must be positive (got {}, {}, {})",
                self.input_dim, self.depth, self.width
            )));
        }
        if self.augmented && self.width % 2 != 0 {
            return Err(IcnnError::Config(format!(
                "augmented networks need an even width, got {}",
                self.width
            )));
        }
        if !self.activation_rest.is_monotone() {
            return Err(IcnnError::Config(format!(
                "activation `{}` on hidden-path units must be nondecreasing",
                self.activation_rest
            )));
        }
        for kind in [self.activation_first, self.activation_rest] {
            if !kind.is_smooth() {
                return Err(IcnnError::Config(format!(
                    "activation `{kind}` has no second derivative everywhere"
                )));
            }
        }
        Ok(())
    }

    /// Units that follow the hidden-path recursion in each layer.
    pub fn main_width(&self) -> usize {
        if self.augmented {
            self.width / 2
        } else {
            self.width
        }
    }

    /// Input-only units per layer (zero for vanilla networks).
    pub fn aug_width(&self) -> usize {
        self.width - self.main_width()
    }
}

impl fmt::Display for IcnnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input_dim={} depth={} width={} augmented={} activation_first={} activation_rest={}",
            self.input_dim, self.depth, self.width, self.augmented, self.activation_first, self.activation_rest
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActNormState {
    pub initialized: bool,
    pub scale: ArrayValue,
    pub shift: ArrayValue,
}

impl ActNormState {
    fn identity(width: usize) -> Self {
        Self {
            initialized: false,
            scale: ArrayValue::full(&[width], 1.0),
            shift: ArrayValue::zeros(&[width]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    /// Input path, `[main_width, d]`.
    pub w: ArrayValue,
    /// Raw hidden-path weights, `[main_width, width]`; absent in layer 1.
    pub raw_v: Option<ArrayValue>,
    /// Bias over the full width.
    pub b: ArrayValue,
    /// Input-only path, `[aug_width, d]`; present iff augmented.
    pub a: Option<ArrayValue>,
    pub actnorm: ActNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialParams {
    pub layers: Vec<HiddenLayer>,
    /// Raw output weights, `[1, width]`.
    pub raw_v_out: ArrayValue,
    /// `[1, d]`.
    pub w_out: ArrayValue,
    /// `[1]`.
    pub b_out: ArrayValue,
    /// Scalar; `softplus(w0)` is the strong-convexity coefficient.
    pub w0: ArrayValue,
    /// Scalar; `softplus(w1)` multiplies the network term.
    pub w1: ArrayValue,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64, offset: f64) -> ArrayValue {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| offset + rng.random_range(-bound..=bound)).collect();
    ArrayValue::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fan-in uniform initialization with `softplus(raw) ~ 1` on positive paths,
/// `softplus(w0) = 1`, `w1 = 0` and uninitialized ActNorm.
pub fn init_params(config: &IcnnConfig, seed: u64) -> Result<PotentialParams> {
    config.validate()?;
    let d = config.input_dim;
    let (w, mw, aw) = (config.width, config.main_width(), config.aug_width());
    let raw_one = activations::softplus_inverse(1.0);
    let bd = 1.0 / (d as f64).sqrt();
    let bw = 1.0 / (w as f64).sqrt();
    let mut layers = Vec::with_capacity(config.depth);
    for k in 0..config.depth {
        let mut rng = rng_for(seed, &[k as u64]);
        let w_in = uniform(&mut rng, &[mw, d], bd, 0.0);
        let raw_v = (k > 0).then(|| uniform(&mut rng, &[mw, w], bw, raw_one));
        let a = config.augmented.then(|| uniform(&mut rng, &[aw, d], bd, 0.0));
        let fan = if k == 0 { bd } else { bw };
        let b = uniform(&mut rng, &[w], fan, 0.0);
        layers.push(HiddenLayer {
            w: w_in,
            raw_v,
            b,
            a,
            actnorm: ActNormState::identity(w),
        });
    }
    let mut rng = rng_for(seed, &[config.depth as u64]);
    Ok(PotentialParams {
        layers,
        raw_v_out: uniform(&mut rng, &[1, w], bw, raw_one),
        w_out: uniform(&mut rng, &[1, d], bd, 0.0),
        b_out: ArrayValue::zeros(&[1]),
        w0: ArrayValue::scalar(raw_one),
        w1: ArrayValue::scalar(0.0),
    })
}

impl PotentialParams {
    /// Named arrays in canonical order.
    pub fn tensors(&self) -> Vec<(String, &ArrayValue)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let k = i + 1;
            out.push((format!("layer{k}.W"), &l.w));
            if let Some(v) = &l.raw_v {
                out.push((format!("layer{k}.rawV"), v));
            }
            out.push((format!("layer{k}.b"), &l.b));
            if let Some(a) = &l.a {
                out.push((format!("layer{k}.A"), a));
            }
            out.push((format!("layer{k}.actnorm.scale"), &l.actnorm.scale));
            out.push((format!("layer{k}.actnorm.shift"), &l.actnorm.shift));
        }
        out.push(("out.rawv".into(), &self.raw_v_out));
        out.push(("out.W".into(), &self.w_out));
        out.push(("out.b".into(), &self.b_out));
        out.push(("reparam.w0".into(), &self.w0));
        out.push(("reparam.w1".into(), &self.w1));
        out
    }

    /// Mutable named arrays, same order as [`PotentialParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut ArrayValue)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let k = i + 1;
            out.push((format!("layer{k}.W"), &mut l.w));
            if let Some(v) = &mut l.raw_v {
                out.push((format!("layer{k}.rawV"), v));
            }
            out.push((format!("layer{k}.b"), &mut l.b));
            if let Some(a) = &mut l.a {
                out.push((format!("layer{k}.A"), a));
            }
            out.push((format!("layer{k}.actnorm.scale"), &mut l.actnorm.scale));
            out.push((format!("layer{k}.actnorm.shift"), &mut l.actnorm.shift));
        }
        out.push(("out.rawv".into(), &mut self.raw_v_out));
        out.push(("out.W".into(), &mut self.w_out));
        out.push(("out.b".into(), &mut self.b_out));
        out.push(("reparam.w0".into(), &mut self.w0));
        out.push(("reparam.w1".into(), &mut self.w1));
        out
    }

    /// Overwrites every tensor from `lookup`, checking shapes.
    pub fn load_tensors<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a ArrayValue>) -> Result<()> {
        for (name, t) in self.tensors_mut() {
            let src = lookup(&name).ok_or_else(|| IcnnError::MissingTensor(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(IcnnError::TensorShape {
                    name,
                    expected: t.shape().to_vec(),
                    got: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.layers.iter().all(|l| l.actnorm.initialized)
    }

    pub fn set_actnorm_initialized(&mut self, flag: bool) {
        for l in &mut self.layers {
            l.actnorm.initialized = flag;
        }
    }

    /// Enforces `scale >= MIN_ACTNORM_SCALE`; called after optimizer steps.
    pub fn clamp_actnorm(&mut self) {
        for l in &mut self.layers {
            for s in l.actnorm.scale.data_mut() {
                if !(*s >= MIN_ACTNORM_SCALE) {
                    *s = MIN_ACTNORM_SCALE;
                }
            }
        }
    }

    pub fn strong_convexity(&self) -> f64 {
        activations::eval(ActivationKind::softplus(), self.w0.item())
    }

    /// Effective positive weights `softplus(raw) / fan_in` of every
    /// hidden-path and output matrix.
    pub fn positive_weights(&self) -> Vec<ArrayValue> {
        let sp = ActivationKind::softplus();
        let fan = |raw: &ArrayValue| {
            let n = raw.cols() as f64;
            raw.map(|r| activations::eval(sp, r) / n)
        };
        self.layers
            .iter()
            .filter_map(|l| l.raw_v.as_ref().map(fan))
            .chain(std::iter::once(fan(&self.raw_v_out)))
            .collect()
    }
}

/// Graph handles of a bound [`PotentialParams`].
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub w: NodeId,
    pub raw_v: Option<NodeId>,
    pub b: NodeId,
    pub a: Option<NodeId>,
    pub scale: NodeId,
    pub shift: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: Vec<BoundLayer>,
    pub raw_v_out: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub w0: NodeId,
    pub w1: NodeId,
    initialized: Vec<bool>,
}

impl BoundParams {
    /// Node ids in the order of [`PotentialParams::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w);
            out.extend(l.raw_v);
            out.push(l.b);
            out.extend(l.a);
            out.push(l.scale);
            out.push(l.shift);
        }
        out.extend([self.raw_v_out, self.w_out, self.b_out, self.w0, self.w1]);
        out
    }
}

/// Adds the parameters to `g` as leaves (`trainable`) or constants.
pub fn bind(g: &mut Graph, params: &PotentialParams, trainable: bool) -> BoundParams {
    let mut put = |v: &ArrayValue| {
        if trainable {
            g.leaf(v.clone())
        } else {
            g.constant(v.clone())
        }
    };
    let layers = params
        .layers
        .iter()
        .map(|l| BoundLayer {
            w: put(&l.w),
            raw_v: l.raw_v.as_ref().map(&mut put),
            b: put(&l.b),
            a: l.a.as_ref().map(&mut put),
            scale: put(&l.actnorm.scale),
            shift: put(&l.actnorm.shift),
        })
        .collect();
    BoundParams {
        layers,
        raw_v_out: put(&params.raw_v_out),
        w_out: put(&params.w_out),
        b_out: put(&params.b_out),
        w0: put(&params.w0),
        w1: put(&params.w1),
        initialized: params.layers.iter().map(|l| l.actnorm.initialized).collect(),
    }
}

fn positive(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    let fan = g.shape(raw)[1] as f64;
    let sp = g.activation(ActivationKind::softplus(), raw)?;
    Ok(g.scale(sp, 1.0 / fan)?)
}

/// Pre-ActNorm pre-activation of layer `k` (0-based) given the previous
/// hidden output.
fn preactivation(g: &mut Graph, layer: &BoundLayer, x: NodeId, h_prev: Option<NodeId>) -> Result<NodeId> {
    let mut pre = g.matmul_nt(x, layer.w)?;
    if let (Some(h), Some(raw)) = (h_prev, layer.raw_v) {
        let v = positive(g, raw)?;
        let hv = g.matmul_nt(h, v)?;
        pre = g.add(pre, hv)?;
    }
    if let Some(a) = layer.a {
        let aug = g.matmul_nt(x, a)?;
        pre = g.concat_cols(pre, aug)?;
    }
    Ok(g.add_row(pre, layer.b)?)
}

fn activate(g: &mut Graph, config: &IcnnConfig, k: usize, z: NodeId) -> Result<NodeId> {
    if k == 0 {
        return Ok(g.activation(config.activation_first, z)?);
    }
    if !config.augmented {
        return Ok(g.activation(config.activation_rest, z)?);
    }
    let (mw, aw) = (config.main_width(), config.aug_width());
    let main = g.slice_cols(z, 0, mw)?;
    let aug = g.slice_cols(z, mw, aw)?;
    let main = g.activation(config.activation_rest, main)?;
    let aug = g.activation(config.activation_first, aug)?;
    Ok(g.concat_cols(main, aug)?)
}

fn check_input(g: &Graph, config: &IcnnConfig, x: NodeId) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != config.input_dim {
        return Err(IcnnError::InputDim {
            expected: config.input_dim,
            got: s.last().copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// Per-sample potential `F(x)` as an `[m, 1]` node for `x: [m, d]`.
pub fn potential(g: &mut Graph, p: &BoundParams, config: &IcnnConfig, x: NodeId) -> Result<NodeId> {
    check_input(g, config, x)?;
    if let Some(k) = p.initialized.iter().position(|&f| !f) {
        return Err(IcnnError::ActNormUninitialized { layer: k + 1 });
    }
    let mut h = None;
    for (k, layer) in p.layers.iter().enumerate() {
        let pre = preactivation(g, layer, x, h)?;
        let scaled = g.mul_row(pre, layer.scale)?;
        let normed = g.add_row(scaled, layer.shift)?;
        h = Some(activate(g, config, k, normed)?);
    }
    let h = h.expect("depth >= 1");
    let v_out = positive(g, p.raw_v_out)?;
    let net = g.matmul_nt(h, v_out)?;
    let lin = g.affine(x, p.w_out, p.b_out)?;
    let net = g.add(net, lin)?;

    let sp = ActivationKind::softplus();
    let c1 = g.activation(sp, p.w1)?;
    let net = g.scale_by(net, c1)?;

    let ones = g.constant(ArrayValue::full(&[config.input_dim, 1], 1.0));
    let xx = g.mul(x, x)?;
    let sq = g.matmul(xx, ones)?;
    let c0 = g.activation(sp, p.w0)?;
    let quad = g.scale_by(sq, c0)?;
    let quad = g.scale(quad, 0.5)?;
    Ok(g.add(quad, net)?)
}

/// Gradient map `f(x) = grad F(x)` as an `[m, d]` node that stays
/// differentiable in both `x` and the parameters.
pub fn grad_map(g: &mut Graph, p: &BoundParams, config: &IcnnConfig, x: NodeId) -> Result<NodeId> {
    let f = potential(g, p, config, x)?;
    let total = g.sum_all(f)?;
    Ok(g.gradient(total, &[x], true)?[0])
}

/// Per-sample potential values.
pub fn potential_values(params: &PotentialParams, config: &IcnnConfig, x: &ArrayValue) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let xn = g.constant(x.clone());
    let f = potential(&mut g, &p, config, xn)?;
    Ok(g.value(f).data().to_vec())
}

/// `f(x)` values for a batch.
pub fn grad_map_values(params: &PotentialParams, config: &IcnnConfig, x: &ArrayValue) -> Result<ArrayValue> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let xn = g.leaf(x.clone());
    let f = potential(&mut g, &p, config, xn)?;
    let total = g.sum_all(f)?;
    Ok(g.gradient_values(total, &[xn])?.remove(0))
}

/// Data-dependent ActNorm initialization, layer by layer: each uninitialized
/// layer gets `scale = 1/std`, `shift = -mean/std` of its pre-activations over
/// the batch, so its normalized pre-activations have zero mean and unit
/// (population) variance. Zero-variance units get `scale = 1`,
/// `shift = -mean`; scales are clamped to `MIN_ACTNORM_SCALE`. Layers already
/// flagged are left untouched.
pub fn actnorm_data_init(params: &mut PotentialParams, config: &IcnnConfig, x: &ArrayValue) -> Result<()> {
    config.validate()?;
    let m = x.rows();
    if m < 2 {
        return Err(IcnnError::InitBatchTooSmall(m));
    }
    if x.cols() != config.input_dim {
        return Err(IcnnError::InputDim {
            expected: config.input_dim,
            got: x.cols(),
        });
    }
    for k in 0..config.depth {
        if params.layers[k].actnorm.initialized {
            continue;
        }
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let xn = g.constant(x.clone());
        let mut h = None;
        for (j, layer) in p.layers.iter().enumerate().take(k) {
            let pre = preactivation(&mut g, layer, xn, h)?;
            let scaled = g.mul_row(pre, layer.scale)?;
            let normed = g.add_row(scaled, layer.shift)?;
            h = Some(activate(&mut g, config, j, normed)?);
        }
        let pre = preactivation(&mut g, &p.layers[k], xn, h)?;
        let z = g.value(pre);
        let w = z.cols();
        let mut scale = vec![1.0; w];
        let mut shift = vec![0.0; w];
        for u in 0..w {
            let mean = (0..m).map(|i| z.get(i, u)).sum::<f64>() / m as f64;
            let var = (0..m).map(|i| (z.get(i, u) - mean).powi(2)).sum::<f64>() / m as f64;
            let std = var.sqrt();
            if std <= 1e-12 * (1.0 + mean.abs()) {
                shift[u] = -mean;
            } else {
                scale[u] = (1.0 / std).max(MIN_ACTNORM_SCALE);
                shift[u] = -mean * scale[u];
            }
        }
        let an = &mut params.layers[k].actnorm;
        an.scale = ArrayValue::vector(scale);
        an.shift = ArrayValue::vector(shift);
        an.initialized = true;
    }
    Ok(())
}
