//! Softplus-type activations.
//!
//! Every activation here is the convolution of the ReLU `r(x) = max(0, x)` with a
//! zero-mean base density `p`, so that `s' = F_p` (the base CDF) and `s'' = p`.
//! Three bases are provided (logistic, Gaussian, Laplace) together with the
//! symmetrized (`s(x) - x/2`) and offset (`s(x) - s(0)`) variants and an optional
//! input gain `a`, evaluated as `s(a x) / a`.
//!
//! Derivatives of arbitrary order are available through [`derivative`]; the
//! autodiff engine relies on this to differentiate activations any number of
//! times.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Zero-mean density whose convolution with ReLU defines the activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Base {
    Logistic,
    Gaussian,
    Laplace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Plain,
    /// `s(x) - x/2`; convex but not monotone, only valid where the input is affine in `x`.
    Symmetrized,
    /// `s(x) - s(0)`.
    Offset,
}

#[derive(Debug, Error, PartialEq)]
pub enum ActivationError {
    #[error("unknown activation base `{0}`")]
    UnknownBase(String),
    #[error("unknown activation variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid gain `{0}`: must be a positive finite number")]
    InvalidGain(String),
    #[error("malformed activation encoding `{0}`")]
    Malformed(String),
}

/// A softplus-type activation: base density, variant and input gain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationKind {
    pub base: Base,
    pub variant: Variant,
    gain: f64,
}

impl ActivationKind {
    pub fn new(base: Base, variant: Variant, gain: f64) -> Result<Self, ActivationError> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(ActivationError::InvalidGain(gain.to_string()));
        }
        Ok(Self { base, variant, gain })
    }

    pub const fn plain(base: Base) -> Self {
        Self {
            base,
            variant: Variant::Plain,
            gain: 1.0,
        }
    }

    pub const fn with_variant(base: Base, variant: Variant) -> Self {
        Self {
            base,
            variant,
            gain: 1.0,
        }
    }

    /// The regular softplus `log(1 + e^x)`.
    pub const fn softplus() -> Self {
        Self::plain(Base::Logistic)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Whether the activation is non-decreasing, i.e. safe to apply to a
    /// non-affine convex pre-activation.
    pub fn is_monotone(&self) -> bool {
        self.variant != Variant::Symmetrized
    }

    /// Twice continuously differentiable everywhere (Laplace has a kink in `s''`).
    pub fn is_smooth(&self) -> bool {
        self.base != Base::Laplace
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.base {
            Base::Logistic => "logistic",
            Base::Gaussian => "gaussian",
            Base::Laplace => "laplace",
        };
        let variant = match self.variant {
            Variant::Plain => "plain",
            Variant::Symmetrized => "symmetrized",
            Variant::Offset => "offset",
        };
        write!(f, "{base}+{variant}@gain={}", self.gain)
    }
}

impl FromStr for ActivationKind {
    type Err = ActivationError;

    /// Parses `base[+variant][@gain=a]`, e.g. `gaussian+symmetrized@gain=1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (head, gain) = match s.split_once('@') {
            Some((head, tail)) => {
                let value = tail
                    .strip_prefix("gain=")
                    .ok_or_else(|| ActivationError::Malformed(s.to_string()))?;
                let gain: f64 = value
                    .parse()
                    .map_err(|_| ActivationError::InvalidGain(value.to_string()))?;
                (head, gain)
            }
            None => (s, 1.0),
        };
        let (base, variant) = head.split_once('+').unwrap_or((head, "plain"));
        let base = match base {
            "logistic" | "softplus" => Base::Logistic,
            "gaussian" => Base::Gaussian,
            "laplace" => Base::Laplace,
            other => return Err(ActivationError::UnknownBase(other.to_string())),
        };
        let variant = match variant {
            "plain" => Variant::Plain,
            "symmetrized" => Variant::Symmetrized,
            "offset" => Variant::Offset,
            other => return Err(ActivationError::UnknownVariant(other.to_string())),
        };
        ActivationKind::new(base, variant, gain)
    }
}

/// ReLU, the function every softplus-type activation approximates.
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Activation value.
pub fn eval(kind: ActivationKind, x: f64) -> f64 {
    derivative(kind, 0, x)
}

/// First derivative.
pub fn deriv(kind: ActivationKind, x: f64) -> f64 {
    derivative(kind, 1, x)
}

/// Second derivative.
pub fn deriv2(kind: ActivationKind, x: f64) -> f64 {
    derivative(kind, 2, x)
}

/// Derivative of the given order (0 is the value itself).
pub fn derivative(kind: ActivationKind, order: u32, x: f64) -> f64 {
    let a = kind.gain;
    let ax = a * x;
    let base = base_derivative(kind.base, order, ax) * a.powi(order as i32 - 1);
    match (kind.variant, order) {
        (Variant::Symmetrized, 0) => base - 0.5 * x,
        (Variant::Symmetrized, 1) => base - 0.5,
        (Variant::Offset, 0) => base - base_value(kind.base, 0.0) / a,
        _ => base,
    }
}

/// Derivative of the given order for every entry of `xs`.
pub fn derivative_slice(kind: ActivationKind, order: u32, xs: &[f64]) -> Vec<f64> {
    if kind.base == Base::Logistic && order >= 2 {
        let terms = logistic_terms(order);
        let scale = kind.gain.powi(order as i32 - 1);
        return xs
            .iter()
            .map(|&x| scale * eval_logistic_terms(&terms, kind.gain * x))
            .collect();
    }
    xs.iter().map(|&x| derivative(kind, order, x)).collect()
}

/// The base density's CDF, equal to `s'` by construction.
pub fn base_cdf(base: Base, x: f64) -> f64 {
    match base {
        Base::Logistic => sigmoid(x),
        Base::Gaussian => normal_cdf(x),
        Base::Laplace => {
            if x < 0.0 {
                0.5 * x.exp()
            } else {
                1.0 - 0.5 * (-x).exp()
            }
        }
    }
}

/// The base density, equal to `s''`.
pub fn base_density(base: Base, x: f64) -> f64 {
    match base {
        Base::Logistic => sigmoid(x) * sigmoid(-x),
        Base::Gaussian => normal_pdf(x),
        Base::Laplace => 0.5 * (-x.abs()).exp(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the logistic softplus, `log(e^y - 1)` for `y > 0`.
///
/// The result is polished over neighbouring floats so that evaluating the
/// softplus at it reproduces `y` as closely as the arithmetic allows.
pub fn softplus_inverse(y: f64) -> f64 {
    let x0 = if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    };
    let sp = ActivationKind::softplus();
    let mut best = x0;
    let mut best_err = (eval(sp, x0) - y).abs();
    let (mut up, mut down) = (x0, x0);
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        for cand in [up, down] {
            let err = (eval(sp, cand) - y).abs();
            if err < best_err {
                best = cand;
                best_err = err;
            }
        }
    }
    best
}

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn base_value(base: Base, x: f64) -> f64 {
    match base {
        Base::Logistic => {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        }
        // x Phi(x) + phi(x); the erfc form keeps relative accuracy in the left tail
        Base::Gaussian => {
            if x < 0.0 {
                normal_pdf(x) + x * normal_cdf(x)
            } else {
                // x Phi(x) = x - x Phi(-x)
                x + normal_pdf(x) - x * normal_cdf(-x)
            }
        }
        Base::Laplace => relu(x) + 0.5 * (-x.abs()).exp(),
    }
}

fn base_derivative(base: Base, order: u32, x: f64) -> f64 {
    match order {
        0 => base_value(base, x),
        1 => base_cdf(base, x),
        2 => base_density(base, x),
        k => match base {
            Base::Logistic => eval_logistic_terms(&logistic_terms(k), x),
            // phi^{(n)}(x) = (-1)^n He_n(x) phi(x)
            Base::Gaussian => {
                let n = k - 2;
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * hermite_he(n, x) * normal_pdf(x)
            }
            Base::Laplace => {
                let n = k - 2;
                let sign = if n % 2 == 1 && x > 0.0 { -1.0 } else { 1.0 };
                sign * 0.5 * (-x.abs()).exp()
            }
        },
    }
}

/// Probabilists' Hermite polynomial `He_n`.
fn hermite_he(n: u32, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `s^{(k)}` of the logistic softplus as a polynomial in `p = sigmoid(x)` and
/// `q = sigmoid(-x)`, using `p' = pq` and `q' = -pq`. Terms are `(coef, a, b)`
/// for `coef * p^a * q^b`.
fn logistic_terms(order: u32) -> Vec<(f64, i32, i32)> {
    debug_assert!(order >= 1);
    let mut terms = vec![(1.0, 1, 0)];
    for _ in 1..order {
        let mut next: Vec<(f64, i32, i32)> = Vec::new();
        let mut push = |c: f64, a: i32, b: i32| {
            if let Some(t) = next.iter_mut().find(|t| t.1 == a && t.2 == b) {
                t.0 += c;
            } else {
                next.push((c, a, b));
            }
        };
        for &(c, a, b) in &terms {
            if a > 0 {
                push(c * a as f64, a, b + 1);
            }
            if b > 0 {
                push(-c * b as f64, a + 1, b);
            }
        }
        next.retain(|t| t.0 != 0.0);
        terms = next;
    }
    terms
}

fn eval_logistic_terms(terms: &[(f64, i32, i32)], x: f64) -> f64 {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    terms.iter().map(|&(c, a, b)| c * p.powi(a) * q.powi(b)).sum()
}

/// `s(0)` for a plain base, handy for tests: `ln 2`, `1/sqrt(2 pi)` and `1/2`.
pub fn value_at_zero(base: Base) -> f64 {
    match base {
        Base::Logistic => LN_2,
        Base::Gaussian => 1.0 / (2.0 * PI).sqrt(),
        Base::Laplace => 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const BASES: [Base; 3] = [Base::Logistic, Base::Gaussian, Base::Laplace];

    #[test]
    fn values_at_zero() {
        assert_relative_eq!(eval(ActivationKind::softplus(), 0.0), LN_2, epsilon = 1e-15);
        assert_relative_eq!(eval(ActivationKind::plain(Base::Laplace), 0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(
            eval(ActivationKind::plain(Base::Gaussian), 0.0),
            0.398_942_3,
            epsilon = 1e-7
        );
        for base in BASES {
            assert_relative_eq!(
                eval(ActivationKind::plain(base), 0.0),
                value_at_zero(base),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn gaussian_closed_form_matches_convolution_integral() {
        // s(x) = \int max(x - y, 0) phi(y) dy, Simpson on [-12, x]
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let n = 20_000;
            let lo = -12.0;
            let h = (x - lo) / n as f64;
            let f = |y: f64| (x - y) * normal_pdf(y);
            let mut acc = f(lo) + f(x);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(lo + i as f64 * h);
            }
            let integral = acc * h / 3.0;
            assert_relative_eq!(
                eval(ActivationKind::plain(Base::Gaussian), x),
                integral,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn first_and_second_derivatives_at_zero() {
        assert_eq!(deriv(ActivationKind::softplus(), 0.0), 0.5);
        assert_relative_eq!(
            deriv2(ActivationKind::plain(Base::Gaussian), 0.0),
            0.398_942_3,
            epsilon = 1e-7
        );
    }

    #[test]
    fn symmetrized_logistic_derivative_in_half_band() {
        let kind = ActivationKind::with_variant(Base::Logistic, Variant::Symmetrized);
        for i in -2000..=2000 {
            let x = i as f64 * 0.01;
            let d = deriv(kind, x);
            assert!(d > -0.5 && d < 0.5, "x={x} d={d}");
        }
    }

    #[test]
    fn offset_is_zero_at_origin() {
        for base in BASES {
            let kind = ActivationKind::new(base, Variant::Offset, 2.0).unwrap();
            assert!(eval(kind, 0.0).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_safe_for_large_inputs() {
        let sp = ActivationKind::softplus();
        assert_eq!(eval(sp, 700.0), 700.0);
        assert!(eval(sp, -700.0) >= 0.0);
        assert!(eval(sp, 800.0).is_finite());
        let g = ActivationKind::plain(Base::Gaussian);
        assert_eq!(eval(g, 700.0), 700.0);
        assert_eq!(eval(g, -700.0), 0.0);
    }

    #[test]
    fn higher_derivatives_match_finite_differences() {
        let h = 1e-5;
        for base in [Base::Logistic, Base::Gaussian] {
            for variant in [Variant::Plain, Variant::Symmetrized, Variant::Offset] {
                let kind = ActivationKind::new(base, variant, 1.7).unwrap();
                for &x in &[-2.3, -0.4, 0.3, 1.9] {
                    for order in 0..5u32 {
                        let fd = (derivative(kind, order, x + h) - derivative(kind, order, x - h)) / (2.0 * h);
                        let exact = derivative(kind, order + 1, x);
                        assert!(
                            (fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()),
                            "{kind} order {order} x {x}: fd {fd} vs {exact}"
                        );
                        let batched = derivative_slice(kind, order + 1, &[x])[0];
                        assert_relative_eq!(batched, exact, epsilon = 1e-14, max_relative = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn text_encoding_round_trips() {
        let kind = ActivationKind::new(Base::Gaussian, Variant::Symmetrized, 1.0).unwrap();
        assert_eq!(kind.to_string(), "gaussian+symmetrized@gain=1");
        assert_eq!("gaussian+symmetrized@gain=1".parse::<ActivationKind>().unwrap(), kind);
        assert_eq!(
            "gaussian".parse::<ActivationKind>().unwrap(),
            ActivationKind::plain(Base::Gaussian)
        );
        let k2: ActivationKind = "logistic+offset@gain=2".parse().unwrap();
        assert_eq!(k2.gain(), 2.0);
        assert!("relu".parse::<ActivationKind>().is_err());
        assert!("gaussian@gain=-1".parse::<ActivationKind>().is_err());
        assert!("gaussian+tanh".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &y in &[1e-6, 0.3, 1.0, 5.0, 40.0] {
            let x = softplus_inverse(y);
            assert_relative_eq!(eval(ActivationKind::softplus(), x), y, max_relative = 1e-12);
        }
        assert_eq!(eval(ActivationKind::softplus(), softplus_inverse(1.0)), 1.0);
    }

    fn grid() -> impl Iterator<Item = f64> {
        (-2000..=2000).map(|i| i as f64 * 0.01)
    }

    #[test]
    fn softplus_type_axioms_hold_on_grid() {
        for base in BASES {
            let kind = ActivationKind::plain(base);
            for x in grid() {
                assert!(eval(kind, x) >= relu(x), "{base:?} s >= r at {x}");
                assert!(deriv2(kind, x) >= 0.0, "{base:?} convex at {x}");
            }
            let tol = match base {
                Base::Laplace => (-20.0f64).exp(),
                _ => 1e-6,
            };
            for x in [-20.0, 20.0] {
                assert!((eval(kind, x) - relu(x)).abs() < tol, "{base:?} tail at {x}");
            }
        }
    }

    #[test]
    fn derivative_is_base_cdf() {
        let independent_cdf = |base: Base, x: f64| match base {
            Base::Logistic => 1.0 / (1.0 + (-x).exp()),
            Base::Gaussian => 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Base::Laplace => 0.5 + 0.5 * x.signum() * (1.0 - (-x.abs()).exp()),
        };
        for base in BASES {
            for x in grid() {
                let d = deriv(ActivationKind::plain(base), x);
                assert!((d - independent_cdf(base, x)).abs() < 1e-9, "{base:?} at {x}");
            }
        }
    }

    #[test]
    fn gain_approaches_relu_uniformly() {
        for base in BASES {
            let sup = |a: f64| {
                let kind = ActivationKind::new(base, Variant::Plain, a).unwrap();
                grid().map(|x| (eval(kind, x) - relu(x)).abs()).fold(0.0, f64::max)
            };
            let (s1, s10, s100) = (sup(1.0), sup(10.0), sup(100.0));
            assert!(s1 > s10 && s10 > s100, "{base:?}: {s1} {s10} {s100}");
        }
    }

    #[test]
    fn laplace_derivatives_match_finite_differences_away_from_kink() {
        let kind = ActivationKind::plain(Base::Laplace);
        let h = 1e-6;
        for x in grid().filter(|x| x.abs() > 0.05) {
            let fd1 = (eval(kind, x + h) - eval(kind, x - h)) / (2.0 * h);
            let fd2 = (deriv(kind, x + h) - deriv(kind, x - h)) / (2.0 * h);
            assert!((fd1 - deriv(kind, x)).abs() <= 1e-6 * deriv(kind, x).abs().max(1e-3));
            assert!((fd2 - deriv2(kind, x)).abs() <= 1e-6 * deriv2(kind, x).abs().max(1e-3));
        }
    }
}
