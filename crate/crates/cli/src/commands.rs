//! Subcommand bodies. Each reads a resolved [`CliConfig`] and writes its
//! artifacts under the output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use cpflow::autodiff::ArrayValue;
use cpflow::flow::{
    density_grid, gaussian_ot_reference, potential_grid, trapezoid_integral, FlowError, FlowStack, GridSpec,
    InverseOptions, MAX_EXACT_DIM,
};
use cpflow::training::{
    parse_csv, run_ot_experiment, to_csv, Checkpoint, Dataset, DatasetKind, Standardization, TrainError, Trainer,
    HISTORY_HEADER,
};

use crate::config::{CliConfig, DataSpec};
use crate::CliError;

/// Residual above which an inverted row counts as failed.
pub const INVERT_RESIDUAL_LIMIT: f64 = 1e-3;

const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn read_csv(path: &Path, cfg: &CliConfig) -> Result<ArrayValue, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv(&text, cfg.header_mode().resolve(&text)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn column_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}{i}")).collect()
}

fn csv_with_header(x: &ArrayValue, names: &[String]) -> String {
    let h: Vec<&str> = names.iter().map(String::as_str).collect();
    to_csv(x, Some(&h))
}

pub fn load_dataset(cfg: &CliConfig, seed: u64) -> Result<Dataset, CliError> {
    let ds = match cfg.data()? {
        DataSpec::Toy(kind) => Dataset::toy(kind, cfg.n_samples(), seed)?,
        DataSpec::GaussianOt => Dataset::gaussian_ot(cfg.ot_dim(), cfg.n_samples(), seed)?,
        DataSpec::Csv(path) => Dataset::from_samples(DatasetKind::Csv, read_csv(&path, cfg)?, seed).standardize(),
    };
    if ds.train.rows() == 0 {
        return Err(CliError::Usage("dataset has no training rows".into()));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Trainer), CliError> {
    let ck = Checkpoint::load(path)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    Ok((ck, trainer))
}

/// Standardization stored with the model, if the data was standardized.
fn stored_standardization(ck: &Checkpoint) -> Option<Standardization> {
    let mean = ck.array("data.mean")?.data().to_vec();
    let std = ck.array("data.std")?.data().to_vec();
    Some(Standardization { mean, std })
}

/// Maps model-space rows back to data units.
fn unstandardize(x: &ArrayValue, s: Option<&Standardization>) -> ArrayValue {
    let Some(s) = s else { return x.clone() };
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| v * s.std[k % d] + s.mean[k % d])
        .collect();
    ArrayValue::matrix(x.rows(), d, data)
}

fn checkpoint_for(trainer: &Trainer, data: &Dataset) -> Checkpoint {
    let mut ck = trainer.to_checkpoint();
    if let Some(s) = &data.standardization {
        ck.arrays.push(("data.mean".into(), ArrayValue::vector(s.mean.clone())));
        ck.arrays.push(("data.std".into(), ArrayValue::vector(s.std.clone())));
    }
    ck
}

pub fn train(cfg: &CliConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let resumed = cfg.checkpoint();
    let (mut trainer, data) = match &resumed {
        Some(path) => {
            let (ck, mut t) = load_checkpoint(path)?;
            t.config = cfg.resume_config(&ck.config)?;
            t.adam.lr = t.config.learning_rate;
            let data = load_dataset(cfg, t.config.seed)?;
            (t, data)
        }
        None => {
            let tc = cfg.train_config()?;
            let data = load_dataset(cfg, tc.seed)?;
            (Trainer::new(tc, data.dim())?, data)
        }
    };
    if trainer.stack.dim() != data.dim() {
        return Err(CliError::Usage(format!(
            "checkpoint has dimension {}, data has {}",
            trainer.stack.dim(),
            data.dim()
        )));
    }
    let ck_path = out.join(CHECKPOINT_FILE);
    if resumed.is_none() {
        checkpoint_for(&trainer, &data).save(&ck_path)?;
    }
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| io_err(&out, e))?;

    let history_path = out.join("history.csv");
    let append = resumed.is_some() && history_path.exists();
    let mut history = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&history_path)
        .map_err(|e| io_err(&history_path, e))?;
    if !append {
        writeln!(history, "{HISTORY_HEADER}").map_err(|e| io_err(&history_path, e))?;
    }
    let every = cfg.checkpoint_every();
    let total = trainer.total_steps(data.train.rows());
    let start = trainer.step;
    trainer.run_until(&data, total, |t, row| {
        writeln!(history, "{}", row.csv_row()).map_err(|e| TrainError::Io(e.to_string()))?;
        history.flush().map_err(|e| TrainError::Io(e.to_string()))?;
        if every == 0 || t.step % every == 0 || t.step == total {
            checkpoint_for(t, &data).save(&ck_path)?;
        }
        eprintln!(
            "step {} loss_proxy {:.4} val_nll {:.4} transport_cost {:.4}",
            row.step, row.loss_proxy, row.val_nll, row.transport_cost
        );
        Ok(())
    })?;
    if trainer.step == start {
        checkpoint_for(&trainer, &data).save(&ck_path)?;
    }
    println!(
        "trained to step {} ({} new); checkpoint {}",
        trainer.step,
        trainer.step - start,
        ck_path.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &CliConfig) -> Result<(), CliError> {
    let (ck, mut trainer) = load_checkpoint(&cfg.required_checkpoint()?)?;
    let seed = cfg.seed().unwrap_or(ck.config.seed);
    let data = load_dataset(cfg, seed)?;
    if data.dim() != trainer.stack.dim() {
        return Err(CliError::Usage(format!(
            "checkpoint has dimension {}, data has {}",
            trainer.stack.dim(),
            data.dim()
        )));
    }
    trainer.config.val_max_samples = 0;
    let (nll, cost, kl) = trainer.evaluate(&data.test, data.kind)?;
    let estimator = if data.dim() <= MAX_EXACT_DIM { "exact" } else { "slq" };
    let w2 = match &data.truth {
        Some(t) => Some(gaussian_ot_reference(&t.mean, &t.cov)?.w2_sq),
        None => None,
    };
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    let text = format!(
        "split,n,nll,transport_cost,kl,w2sq_reference,estimator\ntest,{},{nll:?},{cost:?},{},{},{estimator}\n",
        data.test.rows(),
        fmt(kl),
        fmt(w2)
    );
    if cfg.is_set("out") {
        let out = cfg.out_dir();
        ensure_dir(&out)?;
        write_file(&out.join("evaluate.csv"), &text)?;
    }
    print!("{text}");
    Ok(())
}

pub fn sample(cfg: &CliConfig) -> Result<(), CliError> {
    let (ck, trainer) = load_checkpoint(&cfg.required_checkpoint()?)?;
    let seed = cfg.seed().unwrap_or(ck.config.seed);
    let z = trainer.stack.sample(cfg.n(), seed, &InverseOptions::default())?;
    let x = unstandardize(&z, stored_standardization(&ck).as_ref());
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let path = out.join("samples.csv");
    write_file(&path, csv_with_header(&x, &column_names("x", x.cols())))?;
    println!("wrote {} samples to {}", x.rows(), path.display());
    Ok(())
}

/// Solver outcomes that belong to the rows being inverted rather than to
/// the model or the input shape.
fn row_failure(e: &FlowError) -> bool {
    matches!(
        e,
        FlowError::Inversion { .. } | FlowError::Solver { .. } | FlowError::Indefinite { .. }
    )
}

/// Inverts `y` in row chunks; a chunk that fails is retried row by row so a
/// failure is confined to the rows that caused it. Failed rows come back
/// as NaN.
fn invert_rows(stack: &FlowStack, y: &ArrayValue, opts: &InverseOptions) -> Result<ArrayValue, CliError> {
    const CHUNK: usize = 256;
    let d = y.cols();
    let mut out = Vec::with_capacity(y.len());
    for start in (0..y.rows()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(y.rows())).collect();
        match stack.inverse(&y.select_rows(&idx), opts) {
            Ok((x, _)) => out.extend_from_slice(x.data()),
            Err(e) if row_failure(&e) => {
                for &i in &idx {
                    match stack.inverse(&y.select_rows(&[i]), opts) {
                        Ok((x, _)) => out.extend_from_slice(x.data()),
                        Err(e) if row_failure(&e) => out.extend(std::iter::repeat_n(f64::NAN, d)),
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ArrayValue::matrix(y.rows(), d, out))
}

pub fn invert(cfg: &CliConfig) -> Result<(), CliError> {
    let (ck, trainer) = load_checkpoint(&cfg.required_checkpoint()?)?;
    let input = match cfg.data()? {
        DataSpec::Csv(path) => path,
        other => {
            return Err(CliError::Usage(format!(
                "invert reads points from --data csv:PATH, got {other:?}"
            )))
        }
    };
    let y = read_csv(&input, cfg)?;
    let d = trainer.stack.dim();
    if y.cols() != d {
        return Err(CliError::Usage(format!(
            "input rows have {} columns, the model has dimension {d}",
            y.cols()
        )));
    }
    let x = invert_rows(&trainer.stack, &y, &InverseOptions::default())?;
    let fx = trainer.stack.forward(&x)?;
    let residual: Vec<f64> = (0..y.rows())
        .map(|i| {
            let diffs = fx.row(i).iter().zip(y.row(i)).map(|(a, b)| (a - b).abs());
            // f64::max drops NaN, so a failed row is caught explicitly.
            diffs.fold(0.0, |m: f64, r| if r.is_nan() { f64::INFINITY } else { m.max(r) })
        })
        .collect();
    let xd = unstandardize(&x, stored_standardization(&ck).as_ref());
    let mut table = Vec::with_capacity(y.rows() * (d + 1));
    for (i, r) in residual.iter().enumerate() {
        table.extend_from_slice(xd.row(i));
        table.push(*r);
    }
    let mut names = column_names("x", d);
    names.push("residual".into());
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let path = out.join("inverted.csv");
    write_file(
        &path,
        csv_with_header(&ArrayValue::matrix(y.rows(), d + 1, table), &names),
    )?;
    let failed: Vec<usize> = residual
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > INVERT_RESIDUAL_LIMIT)
        .map(|(i, _)| i + 1)
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!(
            "{} row(s) did not invert to residual {INVERT_RESIDUAL_LIMIT:e} (data rows {:?}); see {}",
            failed.len(),
            &failed[..failed.len().min(20)],
            path.display()
        )));
    }
    println!("inverted {} rows to {}", y.rows(), path.display());
    Ok(())
}

pub fn density_grid_cmd(cfg: &CliConfig) -> Result<(), CliError> {
    let (_, trainer) = load_checkpoint(&cfg.required_checkpoint()?)?;
    let stack = &trainer.stack;
    if stack.dim() != 2 {
        return Err(CliError::Usage(format!(
            "density-grid needs a 2-dimensional model, got dimension {}",
            stack.dim()
        )));
    }
    let spec = GridSpec::new(cfg.grid_bounds(), cfg.grid_res())?;
    let grid = density_grid(stack, spec)?;
    let potential = potential_grid(stack, spec)?;
    let pts = spec.points();
    let warped = stack.forward(&pts)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;

    let table = |extra: &dyn Fn(usize) -> Vec<f64>, width: usize| {
        let mut v = Vec::with_capacity(pts.rows() * width);
        for i in 0..pts.rows() {
            v.extend_from_slice(pts.row(i));
            v.extend(extra(i));
        }
        ArrayValue::matrix(pts.rows(), width, v)
    };
    let names = |cols: &[&str]| cols.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    write_file(
        &out.join("grid.csv"),
        csv_with_header(&table(&|i| vec![grid.logp[i]], 3), &names(&["x1", "x2", "logp"])),
    )?;
    write_file(&out.join("density.pgm"), grid.to_pgm())?;
    write_file(
        &out.join("potential.csv"),
        csv_with_header(&table(&|i| vec![potential[i]], 3), &names(&["x1", "x2", "potential"])),
    )?;
    write_file(
        &out.join("mesh.csv"),
        csv_with_header(
            &table(&|i| warped.row(i).to_vec(), 4),
            &names(&["x1", "x2", "y1", "y2"]),
        ),
    )?;
    println!(
        "wrote {} grid points to {}; trapezoid integral of the density {:.6}",
        pts.rows(),
        out.display(),
        trapezoid_integral(&grid)
    );
    Ok(())
}

pub fn ot_experiment(cfg: &CliConfig) -> Result<(), CliError> {
    if let Some(d) = cfg.get("data") {
        if d != "gaussian_ot" {
            return Err(CliError::Usage(format!(
                "ot-experiment runs on gaussian_ot data, got `{d}`"
            )));
        }
    }
    let oc = cfg.ot_config()?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let res = run_ot_experiment(&oc)?;
    write_file(&out.join("ot_curve.csv"), res.to_csv())?;
    write_file(&out.join("ot_diagnostics.csv"), res.diagnostics_csv())?;
    res.trainer.to_checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    let last = res
        .rows
        .last()
        .ok_or_else(|| CliError::Numerical("no rows logged".into()))?;
    println!(
        "w2sq_reference {:.6}\nfinal_transport_cost {:.6}\nfinal_kl {:.6}\nspearman_rho {:.4}",
        res.w2sq_reference,
        last.transport_cost,
        last.kl,
        res.monotonicity()
    );
    Ok(())
}
