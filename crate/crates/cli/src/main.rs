//! `cpflow`: train, evaluate, sample from and visualize convex potential
//! flows, and run the Gaussian optimal-transport experiment.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and I/O errors,
//! 2 for numerical failures (non-finite losses, solver breakdowns, rows
//! that do not invert).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpflow::flow::FlowError;
use cpflow::training::TrainError;

use config::CliConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        TrainError::Flow(e).into()
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpflow", version, about = "Convex potential flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a flow and write history.csv and checkpoint.bin under --out.
    Train(Common),
    /// Report test-split NLL and transport cost of a checkpoint.
    Evaluate(Common),
    /// Draw --n samples from a checkpoint into samples.csv.
    Sample(Common),
    /// Invert the rows of --data csv:PATH through a checkpoint into inverted.csv.
    Invert(Common),
    /// Write grid.csv, density.pgm, potential.csv and mesh.csv for a 2-D model.
    DensityGrid(Common),
    /// Run the Gaussian transport experiment and write ot_curve.csv.
    OtExperiment(Common),
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` file read before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// toy:NAME, csv:PATH or gaussian_ot.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    cg_atol: Option<String>,
    /// x_lo,x_hi,y_lo,y_hi
    #[arg(long, allow_hyphen_values = true)]
    grid_bounds: Option<String>,
    #[arg(long)]
    grid_res: Option<String>,
    #[arg(long)]
    n: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<CliConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => CliConfig::from_file(p)?,
            None => CliConfig::default(),
        };
        let flags = [
            ("data", &self.data),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.lr),
            ("cg_atol", &self.cg_atol),
            ("grid_bounds", &self.grid_bounds),
            ("grid_res", &self.grid_res),
            ("n", &self.n),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Evaluate(c) => commands::evaluate(&c.resolve()?),
        Command::Sample(c) => commands::sample(&c.resolve()?),
        Command::Invert(c) => commands::invert(&c.resolve()?),
        Command::DensityGrid(c) => commands::density_grid_cmd(&c.resolve()?),
        Command::OtExperiment(c) => commands::ot_experiment(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
