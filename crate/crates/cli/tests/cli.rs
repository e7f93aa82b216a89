use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpflow::autodiff::ArrayValue;
use cpflow::flow::{gaussian_ot_reference, FlowStack, InverseOptions};
use cpflow::training::{generate_gaussian_ot, load_csv, Checkpoint, Trainer, OT_HEADER};
use tempfile::TempDir;

const SMALL: &str = "\
# small model so the tests stay fast
n_flows = 1
n_hidden_layers = 2
n_hidden_units = 8
n_samples = 1000
log_every = 4
";

fn cpflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpflow")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the small model for `epochs` into `out`.
fn train_small(dir: &Path, out: &str, epochs: &str) -> PathBuf {
    let cfg = write(dir, "small.cfg", SMALL);
    let out = dir.join(out);
    ok(cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "toy:eight_gaussians",
        "--epochs",
        epochs,
        "--out",
        s(&out),
    ]));
    out
}

fn identity_checkpoint(dir: &Path) -> PathBuf {
    let cfg = write(dir, "identity.cfg", "n_flows = 0\nepochs = 0\nn_samples = 50\n");
    let out = dir.join("identity");
    ok(cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "toy:rings",
        "--out",
        s(&out),
    ]));
    out.join("checkpoint.bin")
}

fn csv_rows(path: &Path) -> ArrayValue {
    load_csv(path, true).unwrap()
}

#[test]
fn train_writes_history_and_checkpoint() {
    let dir = TempDir::new().unwrap();
    let out = train_small(dir.path(), "run", "1");
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("step,loss_proxy,val_nll"));
    assert!(history.lines().count() >= 2);
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.step, 7);
}

#[test]
fn resume_continues_the_step_counter_and_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "small.cfg", SMALL);
    let straight = train_small(dir.path(), "straight", "2");
    let split = train_small(dir.path(), "split", "1");
    let ck = split.join("checkpoint.bin");
    ok(cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "toy:eight_gaussians",
        "--epochs",
        "2",
        "--out",
        s(&split),
        "--checkpoint",
        s(&ck),
    ]));
    let a = fs::read(straight.join("checkpoint.bin")).unwrap();
    let b = fs::read(&ck).unwrap();
    assert_eq!(Checkpoint::decode(&b).unwrap().step, 14);
    assert_eq!(a, b);
    let steps: Vec<String> = fs::read_to_string(split.join("history.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(steps, ["4", "7", "8", "12", "14"]);
}

#[test]
fn resume_refuses_a_different_architecture() {
    let dir = TempDir::new().unwrap();
    let out = train_small(dir.path(), "run", "1");
    let cfg = write(dir.path(), "wider.cfg", "n_hidden_units = 16\nn_samples = 1000\n");
    let o = cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "toy:eight_gaussians",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_hidden_units"), "{}", stderr(&o));
}

#[test]
fn same_config_gives_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let a = train_small(dir.path(), "a", "1");
    let b = train_small(dir.path(), "b", "1");
    for f in ["history.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_key_is_a_usage_error_naming_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "epochs = 1\nbtach_size = 64\n");
    let o = cpflow(&["train", "--config", &cfg, "--data", "toy:rings", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`btach_size`"), "{}", stderr(&o));
    assert!(!dir.path().join("history.csv").exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cpflow(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(cpflow(&["train", "--data", "toy:moons"]).status.code(), Some(1));
    assert_eq!(cpflow(&["sample"]).status.code(), Some(1));
    assert_eq!(cpflow(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_config_values() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.cfg", &format!("{SMALL}epochs = 3\nbatch_size = 500\n"));
    let out = dir.path().join("o");
    ok(cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "toy:one_moon",
        "--epochs",
        "1",
        "--batch-size",
        "100",
        "--out",
        s(&out),
    ]));
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!((ck.config.epochs, ck.config.batch_size, ck.step), (1, 100, 8));
}

#[test]
fn non_finite_training_exits_two_and_keeps_the_last_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("o");
    let o = cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "toy:eight_gaussians",
        "--epochs",
        "1",
        "--lr",
        "1e8",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    Trainer::from_checkpoint(&ck).unwrap();
}

#[test]
fn identity_checkpoint_inverts_to_its_input() {
    let dir = TempDir::new().unwrap();
    let ck = identity_checkpoint(dir.path());
    let input = write(dir.path(), "y.csv", "0.5,-1.25\n3,4\n\n-2,0.125\n");
    let out = dir.path().join("inv");
    ok(cpflow(&[
        "invert",
        "--checkpoint",
        s(&ck),
        "--data",
        &format!("csv:{input}"),
        "--out",
        s(&out),
    ]));
    let x = csv_rows(&out.join("inverted.csv"));
    assert_eq!(x.cols(), 3);
    let want = [[0.5, -1.25], [3.0, 4.0], [-2.0, 0.125]];
    for (i, w) in want.iter().enumerate() {
        assert_eq!(&x.row(i)[..2], w);
        assert_eq!(x.row(i)[2], 0.0);
    }
}

#[test]
fn invert_reproduces_forward_inputs_of_a_trained_checkpoint() {
    let dir = TempDir::new().unwrap();
    let out = train_small(dir.path(), "run", "1");
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    let stack = Trainer::from_checkpoint(&ck).unwrap().stack;
    let x = ArrayValue::matrix(
        64,
        2,
        (0..128).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * 6.0).collect(),
    );
    let y = stack.forward(&x).unwrap();
    let input = write(dir.path(), "y.csv", &cpflow::training::to_csv(&y, Some(&["y1", "y2"])));
    ok(cpflow(&[
        "invert",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--data",
        &format!("csv:{input}"),
        "--out",
        s(&out),
    ]));
    let back = csv_rows(&out.join("inverted.csv"));
    for i in 0..64 {
        for j in 0..2 {
            assert!((back.row(i)[j] - x.row(i)[j]).abs() < 1e-4, "row {i}");
        }
        assert!(back.row(i)[2] < 1e-6);
    }
}

#[test]
fn malformed_input_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let ck = identity_checkpoint(dir.path());
    let input = write(dir.path(), "y.csv", "y1,y2\n1,2\n3,oops\n");
    let o = cpflow(&[
        "invert",
        "--checkpoint",
        s(&ck),
        "--data",
        &format!("csv:{input}"),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn identity_samples_are_reproducible_standard_normal_draws() {
    let dir = TempDir::new().unwrap();
    let ck = identity_checkpoint(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(cpflow(&[
            "sample",
            "--checkpoint",
            s(&ck),
            "--n",
            "3",
            "--seed",
            "11",
            "--out",
            s(&out),
        ]));
        fs::read_to_string(out.join("samples.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let want = FlowStack::identity(2)
        .sample(3, 11, &InverseOptions::default())
        .unwrap();
    let got = csv_rows(&dir.path().join("a/samples.csv"));
    assert_eq!(got, want);
}

#[test]
fn zero_samples_give_a_header_only_file() {
    let dir = TempDir::new().unwrap();
    let ck = identity_checkpoint(dir.path());
    ok(cpflow(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--n",
        "0",
        "--out",
        s(dir.path()),
    ]));
    assert_eq!(fs::read_to_string(dir.path().join("samples.csv")).unwrap(), "x1,x2\n");
}

#[test]
fn density_grid_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = train_small(dir.path(), "run", "1");
    let ck = out.join("checkpoint.bin");
    ok(cpflow(&[
        "density-grid",
        "--checkpoint",
        s(&ck),
        "--grid-bounds",
        "-4,4,-4,4",
        "--grid-res",
        "100",
        "--out",
        s(&out),
    ]));
    let grid = csv_rows(&out.join("grid.csv"));
    assert_eq!((grid.rows(), grid.cols()), (10_000, 3));
    assert!(fs::read_to_string(out.join("grid.csv"))
        .unwrap()
        .starts_with("x1,x2,logp\n"));
    let pgm = fs::read(out.join("density.pgm")).unwrap();
    let header = b"P5\n100 100\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 100 * 100);
    assert_eq!(csv_rows(&out.join("potential.csv")).rows(), 10_000);
    let mesh = csv_rows(&out.join("mesh.csv"));
    assert_eq!((mesh.rows(), mesh.cols()), (10_000, 4));
}

#[test]
fn identity_density_grid_integrates_to_one() {
    let dir = TempDir::new().unwrap();
    let ck = identity_checkpoint(dir.path());
    // [-6, 6] at step 0.05 is 241 points per axis.
    ok(cpflow(&[
        "density-grid",
        "--checkpoint",
        s(&ck),
        "--grid-bounds",
        "-6,6,-6,6",
        "--grid-res",
        "241",
        "--out",
        s(dir.path()),
    ]));
    let g = csv_rows(&dir.path().join("grid.csv"));
    let n = 241;
    let h = 0.05;
    let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let total: f64 = (0..n * n).map(|k| w(k % n) * w(k / n) * g.row(k)[2].exp()).sum::<f64>() * h * h;
    assert!((total - 1.0).abs() < 0.01, "{total}");
}

#[test]
fn density_grid_needs_two_dimensions() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.cfg",
        "n_flows = 0\nepochs = 0\nn_samples = 50\not_dim = 3\n",
    );
    let out = dir.path().join("o");
    ok(cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        "gaussian_ot",
        "--out",
        s(&out),
    ]));
    let o = cpflow(&[
        "density-grid",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dimension 3"), "{}", stderr(&o));
}

#[test]
fn evaluate_reports_test_metrics() {
    let dir = TempDir::new().unwrap();
    let out = train_small(dir.path(), "run", "1");
    let cfg = dir.path().join("small.cfg");
    let o = ok(cpflow(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--data",
        "toy:eight_gaussians",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--out",
        s(&out),
    ]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text, fs::read_to_string(out.join("evaluate.csv")).unwrap());
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[1], row[6]), ("test", "100", "exact"));
    assert!(row[2].parse::<f64>().unwrap().is_finite());
}

#[test]
fn csv_training_stores_the_standardization() {
    let dir = TempDir::new().unwrap();
    let text: String = (0..300)
        .map(|i| {
            let t = i as f64 * 0.1;
            format!("{},{}\n", 100.0 + 5.0 * t.sin(), -3.0 + 0.01 * t.cos())
        })
        .collect();
    let data = write(dir.path(), "d.csv", &format!("a,b\n{text}"));
    let cfg = write(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("o");
    ok(cpflow(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &format!("csv:{data}"),
        "--epochs",
        "1",
        "--out",
        s(&out),
    ]));
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    let names: Vec<&str> = ck.data_arrays().map(|(n, _)| n).collect();
    assert_eq!(names, ["mean", "std"]);
    ok(cpflow(&[
        "sample",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--n",
        "200",
        "--out",
        s(&out),
    ]));
    let x = csv_rows(&out.join("samples.csv"));
    let mean0 = (0..200).map(|i| x.row(i)[0]).sum::<f64>() / 200.0;
    assert!((mean0 - 100.0).abs() < 5.0, "{mean0}");
}

#[test]
fn ot_experiment_writes_the_curve() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "ot.cfg",
        "ot_dim = 2\nn_samples = 1000\neval_samples = 200\nepochs = 1\nn_hidden_layers = 2\nn_hidden_units = 8\nlog_every = 3\nseed = 5\n",
    );
    let o = ok(cpflow(&["ot-experiment", "--config", &cfg, "--out", s(dir.path())]));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("spearman_rho"), "{stdout}");
    let text = fs::read_to_string(dir.path().join("ot_curve.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), OT_HEADER);
    assert_eq!(OT_HEADER, "step,kl,transport_cost,w2sq_reference");
    let curve = csv_rows(&dir.path().join("ot_curve.csv"));
    let (_, truth) = generate_gaussian_ot(2, 1200, 5).unwrap();
    let w2 = gaussian_ot_reference(&truth.mean, &truth.cov).unwrap().w2_sq;
    for i in 0..curve.rows() {
        assert_eq!(curve.row(i)[3], w2);
    }
    assert_eq!(curve.row(0)[0], 0.0);
    assert_eq!(curve.row(curve.rows() - 1)[0], 8.0);
    csv_rows(&dir.path().join("ot_diagnostics.csv"));
}

#[test]
fn ot_experiment_refuses_keys_it_fixes() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "ot.cfg", "n_flows = 2\n");
    let o = cpflow(&["ot-experiment", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_flows"));
}
