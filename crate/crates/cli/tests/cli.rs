use std::path::Path;
use std::process::{Command, Output};

fn ahsse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ahsse")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let out = ahsse(&[
        "preset",
        "sse_vs_qme",
        "--print-config",
        "--set",
        "grid.m=32",
        "--set",
        "time.t_final=0.5",
        "--set",
        "time.sample_stride=5",
        "--set",
        "ensemble.n_trajectories=4",
        "--set",
        "noise_validation.samples=200",
        "--set",
        "qme.dt=0.1",
    ]);
    assert!(out.status.success());
    let path = dir.join("config.json");
    std::fs::write(&path, &out.stdout).unwrap();
    path
}

#[test]
fn print_config_is_valid_json() {
    let out = ahsse(&["preset", "example1", "--print-config"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["name"], "example1");
}

#[test]
fn config_errors_exit_with_2() {
    assert_eq!(ahsse(&["preset", "example9"]).status.code(), Some(2));
    assert_eq!(ahsse(&["preset", "example1", "--print-config", "--set", "grid.m=100"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_with_4() {
    let out = ahsse(&["run", "--config", "/nonexistent/ahsse.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/ahsse.json"));
}

#[test]
fn subcommands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let config = config.to_str().unwrap();
    let run_dir = dir.path().join("run");
    let out = ahsse(&["run", "--config", config, "--out", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metadata.json", "timeseries.csv", "final_samples.csv", "qme.csv"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }

    let k = dir.path().join("k");
    assert!(ahsse(&["kernels", "--config", config, "--out", k.to_str().unwrap()]).status.success());
    let table = std::fs::read_to_string(k.join("kernels.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 11);

    let q = dir.path().join("q");
    assert!(ahsse(&["qme", "--config", config, "--out", q.to_str().unwrap()]).status.success());
    assert!(q.join("qme.csv").exists());
}

#[test]
fn noise_validation_reports_both_branches() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let cfg = serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&config).unwrap()).unwrap();
    let mut cfg = cfg;
    cfg["physics"]["mode"] = serde_json::json!("non_markovian");
    cfg["physics"]["c0"] = serde_json::Value::Null;
    cfg["time"]["dt"] = serde_json::json!(0.05);
    cfg["time"]["sample_stride"] = serde_json::json!(1);
    cfg["physics"]["memory_window"] = serde_json::json!(0.1);
    cfg["qme"] = serde_json::Value::Null;
    std::fs::write(&config, cfg.to_string()).unwrap();
    let out = ahsse(&["noise-validate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("noise_validation.json")).unwrap()).unwrap();
    for b in ["plus", "minus"] {
        assert_eq!(report[b]["samples"], 200);
        assert!(report[b]["max_z_covariance"].as_f64().unwrap() < 5.0);
    }
}
