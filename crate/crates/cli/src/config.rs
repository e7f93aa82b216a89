//! Flat `key = value` configuration shared by every subcommand.
//!
//! Keys are the training keys plus a handful of paths and subcommand
//! settings. A file is read first, then command-line flags override it.
//! Values are checked when they are set so a typo fails before any work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cpflow::training::{parse_pairs, DatasetKind, OtExperimentConfig, TrainConfig, CONFIG_KEYS};

use crate::CliError;

/// Keys that are not training hyperparameters.
pub const CLI_KEYS: &[&str] = &[
    "data",
    "out",
    "checkpoint",
    "n_samples",
    "ot_dim",
    "eval_samples",
    "csv_header",
    "checkpoint_every",
    "grid_bounds",
    "grid_res",
    "n",
];

/// Training keys that fix the architecture; a resumed run cannot change them.
const ARCHITECTURE_KEYS: &[&str] = &[
    "n_flows",
    "n_hidden_layers",
    "n_hidden_units",
    "augmented",
    "activation_first",
    "activation_rest",
    "actnorm",
];

/// Training keys that carry over to the optimal-transport experiment.
const OT_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "n_hidden_layers",
    "n_hidden_units",
    "cg_atol",
    "log_every",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSpec {
    Toy(DatasetKind),
    Csv(PathBuf),
    GaussianOt,
}

impl std::str::FromStr for DataSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "gaussian_ot" {
            return Ok(DataSpec::GaussianOt);
        }
        if let Some(name) = s.strip_prefix("toy:") {
            let kind: DatasetKind = name.parse().map_err(|e| format!("{e}"))?;
            return match kind {
                DatasetKind::OneMoon | DatasetKind::EightGaussians | DatasetKind::Rings => Ok(DataSpec::Toy(kind)),
                other => Err(format!("`{other}` is not a toy dataset")),
            };
        }
        if let Some(path) = s.strip_prefix("csv:") {
            if path.is_empty() {
                return Err("csv data needs a path".into());
            }
            return Ok(DataSpec::Csv(PathBuf::from(path)));
        }
        Err(format!("expected toy:NAME, csv:PATH or gaussian_ot, got `{s}`"))
    }
}

/// Whether CSV input starts with a header line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeaderMode {
    Auto,
    Yes,
    No,
}

impl HeaderMode {
    /// `Auto` treats the first non-blank line as a header when any field is
    /// not a number.
    pub fn resolve(self, text: &str) -> bool {
        match self {
            HeaderMode::Yes => true,
            HeaderMode::No => false,
            HeaderMode::Auto => text
                .lines()
                .find(|l| !l.trim().is_empty())
                .is_some_and(|l| l.split(',').any(|f| f.trim().parse::<f64>().is_err())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<String, String>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid value `{value}` for key `{key}`: {e}")))
}

fn parse_bounds(value: &str) -> Result<[f64; 4], CliError> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse_value("grid_bounds", p))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| CliError::Usage(format!("grid_bounds needs four values a,b,c,d, got `{value}`")))
}

fn check(key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "data" => value.parse::<DataSpec>().map(|_| ()).map_err(CliError::Usage),
        "out" | "checkpoint" => Ok(()),
        "n_samples" | "ot_dim" | "eval_samples" | "checkpoint_every" | "grid_res" | "n" => {
            parse_value::<usize>(key, value).map(|_| ())
        }
        "csv_header" => match value {
            "auto" | "true" | "false" => Ok(()),
            _ => Err(CliError::Usage(format!(
                "invalid value `{value}` for key `csv_header`: expected auto, true or false"
            ))),
        },
        "grid_bounds" => parse_bounds(value).map(|_| ()),
        _ => TrainConfig::default()
            .set(key, value)
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

impl CliConfig {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (key, value, line) in parse_pairs(text).map_err(|e| CliError::Usage(e.to_string()))? {
            c.set(&key, &value)
                .map_err(|e| CliError::Usage(format!("line {line}: {e}")))?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Sets one key, replacing any earlier value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        if !CLI_KEYS.contains(&key) && !CONFIG_KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        check(key, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// A value already checked by [`CliConfig::set`], or `default`.
    fn typed<T: std::str::FromStr>(&self, key: &str, default: T) -> T {
        self.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
    }

    pub fn data(&self) -> Result<DataSpec, CliError> {
        self.get("data")
            .ok_or_else(|| CliError::Usage("no dataset given; pass --data or set `data`".into()))?
            .parse()
            .map_err(CliError::Usage)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("."))
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.get("checkpoint").map(PathBuf::from)
    }

    pub fn required_checkpoint(&self) -> Result<PathBuf, CliError> {
        self.checkpoint()
            .ok_or_else(|| CliError::Usage("no checkpoint given; pass --checkpoint or set `checkpoint`".into()))
    }

    pub fn n_samples(&self) -> usize {
        self.typed("n_samples", 50_000)
    }

    pub fn ot_dim(&self) -> usize {
        self.typed("ot_dim", 8)
    }

    /// Steps between checkpoints; 0 saves at every log.
    pub fn checkpoint_every(&self) -> u64 {
        self.typed("checkpoint_every", 0)
    }

    pub fn header_mode(&self) -> HeaderMode {
        match self.get("csv_header") {
            Some("true") => HeaderMode::Yes,
            Some("false") => HeaderMode::No,
            _ => HeaderMode::Auto,
        }
    }

    pub fn grid_bounds(&self) -> [f64; 4] {
        self.get("grid_bounds")
            .and_then(|v| parse_bounds(v).ok())
            .unwrap_or([-4.0, 4.0, -4.0, 4.0])
    }

    pub fn grid_res(&self) -> usize {
        self.typed("grid_res", 100)
    }

    pub fn n(&self) -> usize {
        self.typed("n", 1000)
    }

    pub fn seed(&self) -> Option<u64> {
        self.get("seed").and_then(|v| v.parse().ok())
    }

    /// Training keys applied over `base`, validated.
    pub fn train_config_over(&self, base: TrainConfig) -> Result<TrainConfig, CliError> {
        let mut c = base;
        for key in CONFIG_KEYS {
            if let Some(v) = self.get(key) {
                c.set(key, v).map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        self.train_config_over(TrainConfig::default())
    }

    /// The checkpoint's configuration with this run's overrides. Changing
    /// the architecture of a saved model is refused.
    pub fn resume_config(&self, saved: &TrainConfig) -> Result<TrainConfig, CliError> {
        let c = self.train_config_over(saved.clone())?;
        let (old, new) = (saved.to_text(), c.to_text());
        for (a, b) in old.lines().zip(new.lines()) {
            let key = a.split(" = ").next().unwrap_or("");
            if ARCHITECTURE_KEYS.contains(&key) && a != b {
                return Err(CliError::Usage(format!(
                    "`{key}` differs from the checkpoint (`{a}` vs `{b}`); architecture keys cannot change on resume"
                )));
            }
        }
        Ok(c)
    }

    /// Experiment defaults with the applicable keys applied. Training keys
    /// that the experiment fixes are refused rather than ignored.
    pub fn ot_config(&self) -> Result<OtExperimentConfig, CliError> {
        let mut c = OtExperimentConfig::default();
        for key in CONFIG_KEYS {
            if self.is_set(key) && !OT_KEYS.contains(key) {
                return Err(CliError::Usage(format!("key `{key}` does not apply to ot-experiment")));
            }
        }
        c.dim = self.typed("ot_dim", c.dim);
        c.n_samples = self.typed("n_samples", c.n_samples);
        c.eval_samples = self.typed("eval_samples", c.eval_samples);
        c.epochs = self.typed("epochs", c.epochs);
        c.batch_size = self.typed("batch_size", c.batch_size);
        c.learning_rate = self.typed("learning_rate", c.learning_rate);
        c.n_hidden_layers = self.typed("n_hidden_layers", c.n_hidden_layers);
        c.n_hidden_units = self.typed("n_hidden_units", c.n_hidden_units);
        c.cg_atol = self.typed("cg_atol", c.cg_atol);
        c.log_every = self.typed("log_every", c.log_every);
        c.seed = self.typed("seed", c.seed);
        if c.dim == 0 || c.n_samples == 0 || c.batch_size == 0 || c.log_every == 0 {
            return Err(CliError::Usage(
                "ot-experiment needs positive ot_dim, n_samples, batch_size and log_every".into(),
            ));
        }
        c.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    /// Every set key in canonical `key = value` form, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
