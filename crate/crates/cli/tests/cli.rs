use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ibinn_core::checkpoint;
use ndarray::{array, Array2};
use serde_json::Value;

const SMALL: &str = "\
generator = blobs
classes = 3
train_size = 1200
test_size = 300
epochs = 3
milestones = 2
lr = 0.002
blocks = 3
hidden = 16
";

fn ibinn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibinn")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Temp dir holding `small.cfg` and a model trained from it under `m/`.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    ok(&ibinn(dir.path(), &["train", "--config", "small.cfg", "--out", "m"]));
    dir
}

fn csv_rows(path: PathBuf) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn help_lists_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = ibinn(dir.path(), &["--help"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["train", "eval", "ood", "sample", "interpolate", "gradcheck", "sigma-sweep", "gamma-sweep", "bound-check"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn training_is_reproducible_and_manifested() {
    let dir = trained();
    ok(&ibinn(dir.path(), &["train", "--config", "small.cfg", "--out", "again"]));
    for f in ["checkpoint.ibinn", "checkpoint-epoch2.ibinn", "steps.csv", "metrics.json", "reliability.csv", "manifest.json"] {
        let a = fs::read(dir.path().join("m").join(f)).unwrap();
        let b = fs::read(dir.path().join("again").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let m = json(dir.path().join("m/manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["train_size"], "1200");
    assert_eq!(m["inputs"][0]["path"], "small.cfg");
    let digest = m["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "checkpoint.ibinn"));
    let text = fs::read_to_string(dir.path().join("m/manifest.json")).unwrap();
    assert!(!text.contains("time") && !text.contains("date"));
    let metrics = json(dir.path().join("m/metrics.json"));
    assert!(metrics["accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = ibinn(
        dir.path(),
        &["gradcheck", "--config", "small.cfg", "--set", "hidden=8", "--seed", "5", "--gamma", "2", "--out", "g", "--coords", "20"],
    );
    ok(&out);
    let m = json(dir.path().join("g/manifest.json"));
    assert_eq!(m["config"]["hidden"], "8");
    assert_eq!(m["config"]["gamma"], "2");
    assert_eq!(m["seed"], 5);
    let report = json(dir.path().join("g/gradcheck.json"));
    assert_eq!(report["passed"], true);
}

#[test]
fn sampling_and_interpolation() {
    let dir = trained();
    let ckpt = "m/checkpoint.ibinn";
    ok(&ibinn(dir.path(), &["sample", "--checkpoint", ckpt, "--class", "2", "--count", "0", "--out", "s0"]));
    let text = fs::read_to_string(dir.path().join("s0/samples.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);

    ok(&ibinn(dir.path(), &["sample", "--checkpoint", ckpt, "--class", "2", "--count", "4", "--temperature", "0", "--out", "s"]));
    let model = checkpoint::load(&dir.path().join(ckpt)).unwrap().model;
    let mu = model.gmm.means().row(1).to_owned().insert_axis(ndarray::Axis(0));
    let at_mean = model.flow.inverse(mu.view()).unwrap();
    let text = fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(v[2], 2.0);
        assert!((v[0] - at_mean[[0, 0]]).abs() < 1e-12 && (v[1] - at_mean[[0, 1]]).abs() < 1e-12);
    }

    let (from, to) = ("0.31,0.62", "0.74,0.35");
    ok(&ibinn(dir.path(), &["interpolate", "--checkpoint", ckpt, "--from", from, "--to", to, "--steps", "41", "--out", "i"]));
    let rows = csv_rows(dir.path().join("i/trajectory.csv"));
    assert_eq!(rows.len(), 41);
    let (a, b) = (array![0.31, 0.62], array![0.74, 0.35]);
    assert!((rows[0][2] - a[0]).abs() < 1e-5 && (rows[0][3] - a[1]).abs() < 1e-5);
    assert!((rows[40][2] - b[0]).abs() < 1e-5 && (rows[40][3] - b[1]).abs() < 1e-5);
    let ends = Array2::from_shape_vec((2, 2), vec![a[0], a[1], b[0], b[1]]).unwrap();
    let (z, _) = model.flow.forward(ends.view()).unwrap();
    let mid = model.flow.inverse(((&z.row(0) + &z.row(1)) / 2.0).insert_axis(ndarray::Axis(0)).view()).unwrap();
    assert!((rows[20][2] - mid[[0, 0]]).abs() < 1e-9 && (rows[20][3] - mid[[0, 1]]).abs() < 1e-9);
    let max_step = rows.windows(2).map(|w| (w[1][2] - w[0][2]).hypot(w[1][3] - w[0][3])).fold(0.0, f64::max);
    assert!(max_step < 0.05, "jump of {max_step}");

    let out = ibinn(dir.path(), &["interpolate", "--checkpoint", ckpt, "--from", from, "--to", to, "--steps", "1", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ood_check_failure_exits_one() {
    let dir = trained();
    let ckpt = "m/checkpoint.ibinn";
    let out = ibinn(dir.path(), &["ood", "--config", "small.cfg", "--checkpoint", ckpt, "--kinds", "noise", "--min-auc", "100.1", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let report = json(dir.path().join("o/ood.json"));
    assert!(report.to_string().contains("noise"));
    assert!(dir.path().join("o/roc-noise.csv").exists());
}

#[test]
fn bound_check_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["bound-check", "--levels", "3", "--probs", "0.2,0.5,0.3", "--sigmas", "0.0333,0.3333", "--out", "b"];
    ok(&ibinn(dir.path(), &args));
    let report = fs::read_to_string(dir.path().join("b/bound.json")).unwrap();
    assert!(report.contains("bound"));
    let out = ibinn(dir.path(), &["bound-check", "--levels", "3", "--probs", "0.5,0.5", "--out", "b2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ibinn(dir.path(), &["train", "--set", "nonsense=1", "--out", "t"]);
    assert_eq!(out.status.code(), Some(2));
}
