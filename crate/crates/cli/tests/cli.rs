use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn subinf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subinf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = subinf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small noisy linear problem with three features.
fn fixture() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("a,b,c,target\n");
    for i in 0..60 {
        let (a, b, c) = (
            i as f64 / 10.0,
            ((i * 7) % 11) as f64,
            ((i * 3) % 5) as f64 - 2.0,
        );
        let y = 1.5 * a - 0.3 * b + c + 0.1 * ((i * 13) % 7) as f64;
        csv.push_str(&format!("{a},{b},{c},{y}\n"));
    }
    fs::write(dir.path().join("data.csv"), csv).unwrap();
    let cfg = r#"
seed = 4
trials = 2

[data]
path = "data.csv"
target = "target"

[model]
hidden_sizes = [8]

[train]
epochs = 10

[swa]
epochs = 8

[subspace]
rank = 3

[inference]
temperature = 10.0
num_samples = 6
burn_in = 10

[inference.vi]
steps = 50
"#;
    let path = dir.path().join("exp.toml");
    fs::write(&path, cfg).unwrap();
    (dir, path)
}

#[test]
fn staged_pipeline_produces_every_artifact() {
    let (dir, _) = fixture();
    let d = dir.path();
    ok(d, &["train", "-c", "exp.toml", "--out", "pre.json"]);
    ok(
        d,
        &[
            "swa",
            "-c",
            "exp.toml",
            "--checkpoint",
            "pre.json",
            "--out",
            "swa.json",
        ],
    );
    ok(
        d,
        &[
            "subspace",
            "-c",
            "exp.toml",
            "--checkpoint",
            "swa.json",
            "--out",
            "sub.json",
        ],
    );
    ok(
        d,
        &[
            "sample-ess",
            "-c",
            "exp.toml",
            "--subspace",
            "sub.json",
            "--out",
            "ess.json",
        ],
    );
    ok(
        d,
        &[
            "fit-vi",
            "-c",
            "exp.toml",
            "--subspace",
            "sub.json",
            "--out",
            "vi.json",
        ],
    );

    let env: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("swa.json")).unwrap()).unwrap();
    assert_eq!(env["format_version"], 1);
    assert_eq!(env["kind"], "checkpoint");

    let metrics = ok(
        d,
        &[
            "eval",
            "-c",
            "exp.toml",
            "--subspace",
            "sub.json",
            "--samples",
            "ess.json",
            "--data",
            "data.csv",
        ],
    );
    let m: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(m["nll_unnorm"].as_f64().unwrap().is_finite());
    assert!(m["rmse"].as_f64().unwrap() > 0.0);

    fs::write(d.join("x.csv"), "a,b,c\n0.5,3,1\n2,0,-2\n").unwrap();
    ok(
        d,
        &[
            "predict",
            "--subspace",
            "sub.json",
            "--samples",
            "vi.json",
            "--input",
            "x.csv",
            "--out",
            "p.csv",
        ],
    );
    let pred = fs::read_to_string(d.join("p.csv")).unwrap();
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines[0], "row,mean,std");
    assert_eq!(lines.len(), 3);
}

#[test]
fn spectrum_and_sweep_tables() {
    let (dir, _) = fixture();
    let d = dir.path();
    ok(d, &["train", "-c", "exp.toml", "--out", "pre.json"]);
    ok(
        d,
        &[
            "swa",
            "-c",
            "exp.toml",
            "--checkpoint",
            "pre.json",
            "--out",
            "swa.json",
        ],
    );
    ok(
        d,
        &[
            "spectrum",
            "-c",
            "exp.toml",
            "--checkpoint",
            "swa.json",
            "--out-dir",
            "spectrum-out",
            "--lanczos-iters",
            "4",
        ],
    );
    let traj = fs::read_to_string(d.join("spectrum-out/trajectory.csv")).unwrap();
    assert!(traj.starts_with("index,fraction\n"));
    let fractions: Vec<f64> = traj
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(fractions.windows(2).all(|w| w[0] >= w[1]));
    assert!((fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let hess = fs::read_to_string(d.join("spectrum-out/hessian.csv")).unwrap();
    assert!(hess.starts_with("index,eigenvalue\n"));

    ok(
        d,
        &[
            "temp-sweep",
            "-c",
            "exp.toml",
            "--grid",
            "1,100",
            "--out",
            "sweep.csv",
        ],
    );
    let sweep = fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("temperature,nll_norm,nll_unnorm,rmse,accuracy,coverage95\n"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn curve_between_two_checkpoints() {
    let (dir, _) = fixture();
    let d = dir.path();
    ok(d, &["train", "-c", "exp.toml", "--out", "a.json"]);
    ok(
        d,
        &[
            "train", "-c", "exp.toml", "--set", "seed=5", "--out", "b.json",
        ],
    );
    ok(
        d,
        &[
            "curve-find",
            "-c",
            "exp.toml",
            "--from",
            "a.json",
            "--to",
            "b.json",
            "--out",
            "curve.json",
            "--set",
            "subspace.curve_epochs=3",
        ],
    );
    let env: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("curve.json")).unwrap()).unwrap();
    assert_eq!(env["meta"]["subspace_kind"], "curve");
    ok(
        d,
        &[
            "sample-ess",
            "-c",
            "exp.toml",
            "--subspace",
            "curve.json",
            "--out",
            "s.json",
        ],
    );
}

#[test]
fn uci_is_reproducible_and_logs_splits() {
    let (dir, _) = fixture();
    let d = dir.path();
    ok(
        d,
        &["uci", "-c", "exp.toml", "--out-dir", "r1", "--jobs", "1"],
    );
    ok(
        d,
        &["uci", "-c", "exp.toml", "--out-dir", "r2", "--jobs", "2"],
    );
    let a = fs::read_to_string(d.join("r1/metrics.csv")).unwrap();
    let b = fs::read_to_string(d.join("r2/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("trial,nll_norm,nll_unnorm,rmse,accuracy,coverage95,temperature\n"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r1/report.json")).unwrap()).unwrap();
    let t0 = &report["report"]["trials"][0];
    assert_eq!(t0["test_indices"].as_array().unwrap().len(), 6);
    assert_eq!(t0["train_indices"].as_array().unwrap().len(), 54);
}

#[test]
fn synth_records_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("s.toml"),
        "[data]\nsource = \"synthetic\"\n[model]\nhidden_sizes = [10]\naugment_square_input = true\n\
         [train]\nepochs = 5\n[swa]\nepochs = 10\n[subspace]\nrank = 2\n\
         [inference]\ntemperature = 10.0\nnum_samples = 3\nburn_in = 5\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "synth",
            "-c",
            "s.toml",
            "--out-dir",
            "out",
            "--grid-points",
            "21",
        ],
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["meta"]["synthetic_noise_std"], 0.1);
    assert!(summary["gap_to_data_ratio"].as_f64().unwrap() > 0.0);
    let curve = fs::read_to_string(d.join("out/curve.csv")).unwrap();
    assert!(curve.starts_with("x,mean,std,sample_0,sample_1,sample_2\n"));
    assert_eq!(curve.lines().count(), 22);
    assert_eq!(
        fs::read_to_string(d.join("out/data.csv"))
            .unwrap()
            .lines()
            .count(),
        401
    );
}

#[test]
fn exit_codes_follow_error_class() {
    let (dir, _) = fixture();
    let d = dir.path();
    assert_eq!(subinf(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        subinf(d, &["train", "--out", "x.json"]).status.code(),
        Some(1)
    );
    let bad_cfg = subinf(
        d,
        &[
            "train",
            "-c",
            "exp.toml",
            "--set",
            "inference.prior_std=-1",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(bad_cfg.status.code(), Some(1));
    let missing = subinf(
        d,
        &[
            "train",
            "-c",
            "exp.toml",
            "--set",
            "data.path=absent.csv",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(missing.status.code(), Some(2));
    fs::write(d.join("broken.csv"), "a,target\n1,2\nx,3\n").unwrap();
    let broken = subinf(
        d,
        &[
            "train",
            "-c",
            "exp.toml",
            "--set",
            "data.path=broken.csv",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(broken.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("line 3"));

    // Rank above the number of stored deviations is a request error.
    ok(d, &["train", "-c", "exp.toml", "--out", "pre.json"]);
    ok(
        d,
        &[
            "swa",
            "-c",
            "exp.toml",
            "--set",
            "swa.epochs=1",
            "--checkpoint",
            "pre.json",
            "--out",
            "swa.json",
        ],
    );
    let rank = subinf(
        d,
        &[
            "subspace",
            "-c",
            "exp.toml",
            "--checkpoint",
            "swa.json",
            "--out",
            "s.json",
        ],
    );
    assert_eq!(rank.status.code(), Some(1));

    // A wildly large step size overflows the loss.
    let diverged = subinf(
        d,
        &[
            "train",
            "-c",
            "exp.toml",
            "--set",
            "train.learning_rate=1e150",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(
        diverged.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&diverged.stderr)
    );
}
