use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spotter(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotter"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spotter")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"synthetic": {"train_per_class": 20, "test_per_class": 10}, "train": {"max_epochs": 40}}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn subcommands_chain_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for cmd in ["gen", "fit-thresholds", "extract", "train"] {
        let out = spotter(dir.path(), &["--config", &cfg, cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["data/manifest.jsonl", "thresholds.json", "features_train.csv", "features_test.csv", "classifier.bin", "train_history.csv"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }

    let out = spotter(dir.path(), &["--config", &cfg, "evaluate"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["precision", "recall", "f1", "accuracy", "ap", "auc", "fpr", "fnr"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let out = spotter(dir.path(), &["--config", &cfg, "robustness", "--attack", "blur:1.0", "--attack", "noise:0:1"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.starts_with("none\t"));

    let image = dir.path().join("data/test/fake_0000.ppm");
    let missing = dir.path().join("nope.ppm");
    let out = spotter(
        dir.path(),
        &["--config", &cfg, "predict", image.to_str().unwrap(), missing.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["p"].is_number());
    assert!(lines[1]["error"].is_string());
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = spotter(dir.path(), &["fit-thresholds"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"unknown_field": true}"#).unwrap();
    let out = spotter(dir.path(), &["--config", bad.to_str().unwrap(), "gen"]);
    assert_eq!(out.status.code(), Some(1));

    let out = spotter(dir.path(), &["robustness", "--attack", "blur:-1"]);
    assert_eq!(out.status.code(), Some(1));
}
