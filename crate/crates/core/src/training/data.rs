//! Toy generators, the Gaussian transport generator, CSV ingestion and
//! deterministic splits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Result, TrainError, SPLIT_TAG};
use crate::autodiff::ArrayValue;
use crate::rng::rng_for;
use crate::solvers::cholesky;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    OneMoon,
    EightGaussians,
    Rings,
    GaussianOt,
    Csv,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::OneMoon => "one_moon",
            DatasetKind::EightGaussians => "eight_gaussians",
            DatasetKind::Rings => "rings",
            DatasetKind::GaussianOt => "gaussian_ot",
            DatasetKind::Csv => "csv",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_moon" => Ok(DatasetKind::OneMoon),
            "eight_gaussians" => Ok(DatasetKind::EightGaussians),
            "rings" => Ok(DatasetKind::Rings),
            "gaussian_ot" => Ok(DatasetKind::GaussianOt),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(TrainError::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Statistics of `x`; zero-variance columns get unit scale.
    pub fn fit(x: &ArrayValue) -> Self {
        let (m, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        let mut std = vec![1.0; d];
        for j in 0..d {
            mean[j] = (0..m).map(|i| x.get(i, j)).sum::<f64>() / m.max(1) as f64;
            let var = (0..m).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / m.max(1) as f64;
            if var > 0.0 {
                std[j] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &ArrayValue) -> ArrayValue {
        let d = x.cols();
        let mut y = x.clone();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[k % d]) / self.std[k % d];
        }
        y
    }
}

/// Ground truth of a Gaussian transport dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTruth {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub train: ArrayValue,
    pub val: ArrayValue,
    pub test: ArrayValue,
    pub standardization: Option<Standardization>,
    pub truth: Option<GaussianTruth>,
}

/// Train/validation/test fractions.
pub const SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.cols()
    }

    pub fn len(&self) -> usize {
        self.train.rows() + self.val.rows() + self.test.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shuffles `samples` with `seed` and splits them by [`SPLIT`].
    pub fn from_samples(kind: DatasetKind, samples: ArrayValue, seed: u64) -> Self {
        let n = samples.rows();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, &[SPLIT_TAG]));
        let n_train = (SPLIT[0] * n as f64).round() as usize;
        let n_val = (SPLIT[1] * n as f64).round() as usize;
        let n_val = n_val.min(n - n_train);
        Self {
            kind,
            seed,
            train: samples.select_rows(&idx[..n_train]),
            val: samples.select_rows(&idx[n_train..n_train + n_val]),
            test: samples.select_rows(&idx[n_train + n_val..]),
            standardization: None,
            truth: None,
        }
    }

    /// Standardizes every split with train-split statistics.
    pub fn standardize(mut self) -> Self {
        let s = Standardization::fit(&self.train);
        self.train = s.apply(&self.train);
        self.val = s.apply(&self.val);
        self.test = s.apply(&self.test);
        self.standardization = Some(s);
        self
    }

    pub fn toy(kind: DatasetKind, n: usize, seed: u64) -> Result<Self> {
        Ok(Self::from_samples(kind, generate_toy(kind, n, seed)?, seed))
    }

    pub fn gaussian_ot(d: usize, n: usize, seed: u64) -> Result<Self> {
        let (x, truth) = generate_gaussian_ot(d, n, seed)?;
        let mut ds = Self::from_samples(DatasetKind::GaussianOt, x, seed);
        ds.truth = Some(truth);
        Ok(ds)
    }

    /// CSV data split and standardized with train statistics.
    pub fn csv(path: &Path, has_header: bool, seed: u64) -> Result<Self> {
        let x = load_csv(path, has_header)?;
        Ok(Self::from_samples(DatasetKind::Csv, x, seed).standardize())
    }
}

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Two-dimensional toy samples.
///
/// * `eight_gaussians`: `(4 c + 0.3 e) / 1.414` with `c` uniform over the
///   compass and diagonal unit vectors and `e ~ N(0, I)`.
/// * `one_moon`: `2 (cos t, sin t) + 0.1 e`, `t ~ U[0, pi]`.
/// * `rings`: `(r + 0.08 e) (cos t, sin t)`, `r` uniform in `{1, 2, 3, 4}`,
///   `t ~ U[0, 2 pi)`, scalar `e ~ N(0, 1)`.
pub fn generate_toy(kind: DatasetKind, n: usize, seed: u64) -> Result<ArrayValue> {
    if n == 0 {
        return Err(TrainError::Config("toy datasets need n >= 1".into()));
    }
    let mut rng = rng_for(seed, &[kind as u64]);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut data = Vec::with_capacity(2 * n);
    match kind {
        DatasetKind::EightGaussians => {
            let centers = [
                (1.0, 0.0),
                (-1.0, 0.0),
                (0.0, 1.0),
                (0.0, -1.0),
                (SQRT_HALF, SQRT_HALF),
                (SQRT_HALF, -SQRT_HALF),
                (-SQRT_HALF, SQRT_HALF),
                (-SQRT_HALF, -SQRT_HALF),
            ];
            for _ in 0..n {
                let (cx, cy) = centers[rng.random_range(0..8)];
                let ex = normal(&mut rng);
                let ey = normal(&mut rng);
                data.push((4.0 * cx + 0.3 * ex) / 1.414);
                data.push((4.0 * cy + 0.3 * ey) / 1.414);
            }
        }
        DatasetKind::OneMoon => {
            for _ in 0..n {
                let t = rng.random_range(0.0..=std::f64::consts::PI);
                let ex = normal(&mut rng);
                let ey = normal(&mut rng);
                data.push(2.0 * t.cos() + 0.1 * ex);
                data.push(2.0 * t.sin() + 0.1 * ey);
            }
        }
        DatasetKind::Rings => {
            for _ in 0..n {
                let r = rng.random_range(1..=4) as f64 + 0.08 * normal(&mut rng);
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                data.push(r * t.cos());
                data.push(r * t.sin());
            }
        }
        other => {
            return Err(TrainError::Config(format!("`{other}` is not a toy dataset")));
        }
    }
    Ok(ArrayValue::matrix(n, 2, data))
}

/// Sum of `dof` outer products of standard normal `d`-vectors.
pub fn wishart(d: usize, dof: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for _ in 0..dof {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] += g[i] * g[j];
            }
        }
    }
    a
}

/// `n` samples of `N(mean, cov)` with `mean ~ N(0, I)` and
/// `cov ~ Wishart(I, d + 1)`, plus the true moments.
pub fn generate_gaussian_ot(d: usize, n: usize, seed: u64) -> Result<(ArrayValue, GaussianTruth)> {
    if d == 0 {
        return Err(TrainError::Config("gaussian_ot needs d >= 1".into()));
    }
    let mut rng = rng_for(seed, &[DatasetKind::GaussianOt as u64]);
    let mean: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (cov, l) = loop {
        let cov = wishart(d, d + 1, &mut rng);
        if let Ok(l) = cholesky(&ArrayValue::matrix(d, d, cov.clone())) {
            break (cov, l);
        }
    };
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for i in 0..d {
            data.push(mean[i] + (0..=i).map(|k| l[i * d + k] * e[k]).sum::<f64>());
        }
    }
    Ok((ArrayValue::matrix(n, d, data), GaussianTruth { mean, cov }))
}

/// Parses comma-separated reals. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_csv(text: &str, has_header: bool) -> Result<ArrayValue> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    let mut header_pending = has_header;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| TrainError::Parse {
                line: lineno,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(TrainError::Parse {
                    line: lineno,
                    message: format!("`{field}` is not finite"),
                });
            }
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(TrainError::Parse {
                    line: lineno,
                    message: format!("expected {w} fields, found {count}"),
                });
            }
            _ => {}
        }
        rows += 1;
    }
    let Some(w) = width else {
        return Err(TrainError::Parse {
            line: text.lines().count().max(1),
            message: "no data rows".into(),
        });
    };
    Ok(ArrayValue::matrix(rows, w, data))
}

pub fn load_csv(path: &Path, has_header: bool) -> Result<ArrayValue> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text, has_header)
}

/// Row-major CSV with an optional header line.
pub fn to_csv(x: &ArrayValue, header: Option<&[&str]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
