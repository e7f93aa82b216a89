//! Run hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;

use super::{Result, TrainError};
use crate::activations::ActivationKind;
use crate::icnn::IcnnConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_flows: usize,
    pub n_hidden_layers: usize,
    pub n_hidden_units: usize,
    pub augmented: bool,
    pub activation_first: ActivationKind,
    pub activation_rest: ActivationKind,
    /// Affine normalization in front of every block.
    pub actnorm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cg_atol: f64,
    pub slq_steps: usize,
    pub slq_probes: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    /// Validation cadence in optimizer steps; the final step is always logged.
    pub log_every: usize,
    /// Validation rows used per log; `0` means the whole split.
    pub val_max_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let icnn = IcnnConfig::new(2, 3, 32);
        Self {
            n_flows: 3,
            n_hidden_layers: 3,
            n_hidden_units: 32,
            augmented: icnn.augmented,
            activation_first: icnn.activation_first,
            activation_rest: icnn.activation_rest,
            actnorm: true,
            learning_rate: 0.005,
            batch_size: 128,
            epochs: 50,
            cg_atol: 1e-3,
            slq_steps: 20,
            slq_probes: 32,
            seed: 0,
            grad_clip_norm: None,
            log_every: 100,
            val_max_samples: 2000,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in serialization order.
pub const KEYS: &[&str] = &[
    "n_flows",
    "n_hidden_layers",
    "n_hidden_units",
    "augmented",
    "activation_first",
    "activation_rest",
    "actnorm",
    "learning_rate",
    "batch_size",
    "epochs",
    "cg_atol",
    "slq_steps",
    "slq_probes",
    "seed",
    "grad_clip_norm",
    "log_every",
    "val_max_samples",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(TrainError::Config(format!("invalid value `{value}` for key `{key}`"))),
    }
}

impl TrainConfig {
    pub fn icnn_config(&self, dim: usize) -> IcnnConfig {
        IcnnConfig {
            input_dim: dim,
            depth: self.n_hidden_layers,
            width: self.n_hidden_units,
            augmented: self.augmented,
            activation_first: self.activation_first,
            activation_rest: self.activation_rest,
        }
    }

    /// `n_flows = 0` is allowed and denotes the identity stack.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_hidden_layers", self.n_hidden_layers),
            ("n_hidden_units", self.n_hidden_units),
            ("batch_size", self.batch_size),
            ("slq_steps", self.slq_steps),
            ("slq_probes", self.slq_probes),
            ("log_every", self.log_every),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(TrainError::Config(format!("`{k}` must be positive")));
            }
        }
        for (k, v) in [("learning_rate", self.learning_rate), ("cg_atol", self.cg_atol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("`{k}` must be a positive number, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(TrainError::Config(format!(
                    "`grad_clip_norm` must be positive, got {c}"
                )));
            }
        }
        self.icnn_config(1).validate()?;
        Ok(())
    }

    /// Sets one key from its text value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let act = |v: &str| -> Result<ActivationKind> {
            v.parse()
                .map_err(|e| TrainError::Config(format!("invalid value `{v}` for key `{key}`: {e}")))
        };
        match key {
            "n_flows" => self.n_flows = parse(key, value)?,
            "n_hidden_layers" => self.n_hidden_layers = parse(key, value)?,
            "n_hidden_units" => self.n_hidden_units = parse(key, value)?,
            "augmented" => self.augmented = parse_bool(key, value)?,
            "activation_first" => self.activation_first = act(value)?,
            "activation_rest" => self.activation_rest = act(value)?,
            "actnorm" => self.actnorm = parse_bool(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "cg_atol" => self.cg_atol = parse(key, value)?,
            "slq_steps" => self.slq_steps = parse(key, value)?,
            "slq_probes" => self.slq_probes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "grad_clip_norm" => {
                self.grad_clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "log_every" => self.log_every = parse(key, value)?,
            "val_max_samples" => self.val_max_samples = parse(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "n_flows" => self.n_flows.to_string(),
                "n_hidden_layers" => self.n_hidden_layers.to_string(),
                "n_hidden_units" => self.n_hidden_units.to_string(),
                "augmented" => self.augmented.to_string(),
                "activation_first" => self.activation_first.to_string(),
                "activation_rest" => self.activation_rest.to_string(),
                "actnorm" => self.actnorm.to_string(),
                "learning_rate" => format!("{:?}", self.learning_rate),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "cg_atol" => format!("{:?}", self.cg_atol),
                "slq_steps" => self.slq_steps.to_string(),
                "slq_probes" => self.slq_probes.to_string(),
                "seed" => self.seed.to_string(),
                "grad_clip_norm" => self.grad_clip_norm.map_or("none".into(), |c| format!("{c:?}")),
                "log_every" => self.log_every.to_string(),
                "val_max_samples" => self.val_max_samples.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value, line) in parse_pairs(text)? {
            c.set(&key, &value).map_err(|e| match e {
                TrainError::Config(m) => TrainError::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        Ok(c)
    }
}

/// Splits flat config text into `(key, value, line)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}
