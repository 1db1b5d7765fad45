use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atn_core::bundle::read_bundle;
use serde_json::Value;

fn atn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_line(o: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stdout:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_config_error() {
    let o = atn(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["exit_code"], 2);
}

#[test]
fn schema_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = atn(&["synth-generate", "--n", "2", "--out", p(dir.path()), "--set", "cnr_train.epochz=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "config");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n").unwrap();
    let o = atn(&["synth-generate", "--n", "2", "--out", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = atn(&["fwhm", "--input", "/definitely/not/here", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["error"], "data");
    assert!(e["message"].as_str().unwrap().contains("/definitely/not/here"));
}

#[test]
fn generate_refine_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let small = ["--seed", "5", "--set", "refiner_train.steps=3", "--set", "refiner_train.batch_size=2"];

    let o = atn(&[&["synth-generate", "--n", "6", "--out", p(&d("syn"))][..], &small].concat());
    assert!(o.status.success(), "{o:?}");
    let o = atn(&[&["pseudoreal-generate", "--n", "4", "--out", p(&d("real"))][..], &small].concat());
    assert!(o.status.success(), "{o:?}");

    let run: Value = serde_json::from_str(&fs::read_to_string(d("syn/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth-generate");
    assert_eq!(run["seed"], 5);
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
    assert!(run["seeds"]["synthetic"].is_u64());

    let o = atn(
        &[
            &["train-refiner", "--synthetic", p(&d("syn")), "--real", p(&d("real")), "--out", p(&d("ref"))][..],
            &small,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{o:?}");
    assert!(d("ref/refiner.atn").exists());
    let history = fs::read_to_string(d("ref/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let o = atn(&[
        "refine", "--model", p(&d("ref/refiner.atn")), "--input", p(&d("syn")), "--out", p(&d("refined")),
    ]);
    assert!(o.status.success(), "{o:?}");
    let a = read_bundle(&d("syn")).unwrap();
    let b = read_bundle(&d("refined")).unwrap();
    assert_eq!(a.len(), b.len());
    assert_eq!(a.patches[0].dim(), b.patches[0].dim());
    assert_eq!(a.labels, b.labels);

    let o = atn(&["plot", "loss", "--history", p(&d("ref/history.csv")), "--out", p(&d("fig"))]);
    assert!(o.status.success(), "{o:?}");
    assert!(d("fig/loss_0.png").exists() && d("fig/loss_all.png").exists());
    let o = atn(&["plot", "pairs", "--input", p(&d("syn")), "--refined", p(&d("refined")), "--out", p(&d("fig"))]);
    assert!(o.status.success(), "{o:?}");
    let img = image::open(d("fig/pairs.png")).unwrap();
    assert!(img.width() > img.height());

    let o = atn(&["fwhm", "--input", p(&d("real")), "--out", p(&d("fwhm"))]);
    assert!(o.status.success(), "{o:?}");
    let m = fs::read_to_string(d("fwhm/measurements.csv")).unwrap();
    assert_eq!(m.lines().count(), 5);
    let o = atn(&[
        "plot", "overlay", "--input", p(&d("real")), "--measurements", p(&d("fwhm/measurements.csv")), "--out",
        p(&d("fig")),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(d("fig/overlay.png").exists());
}

#[test]
fn deterministic_generation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for k in ["a", "b"] {
        let out = dir.path().join(k);
        let o = atn(&["synth-generate", "--n", "5", "--seed", "11", "--deterministic", "--out", p(&out)]);
        assert!(o.status.success());
    }
    for f in ["patches.bin", "labels.csv", "manifest.txt", "run.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        if f == "run.json" {
            let (mut a, mut b): (Value, Value) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
            assert!(a.get("elapsed_s").is_none());
            a["argv"] = Value::Null;
            b["argv"] = Value::Null;
            assert_eq!(a, b);
        } else {
            assert_eq!(a, b, "{f} differs");
        }
    }
}

#[test]
fn refiner_divergence_exits_4_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    assert!(atn(&["synth-generate", "--n", "4", "--out", p(&d("syn"))]).status.success());
    assert!(atn(&["pseudoreal-generate", "--n", "4", "--out", p(&d("real"))]).status.success());
    let o = atn(&[
        "train-refiner", "--synthetic", p(&d("syn")), "--real", p(&d("real")), "--out", p(&d("ref")), "--set",
        "refiner_train.steps=20", "--set", "refiner_train.batch_size=2", "--set", "refiner_train.learning_rate=1e30",
    ]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
    assert_eq!(error_line(&o)["error"], "numerical");
    assert!(d("ref/refiner.atn").exists());
    assert!(d("ref/run.json").exists());
}
