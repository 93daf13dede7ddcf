use std::fs;

use ahsse_core::config::{InitialState, SimulationConfig};
use ahsse_core::ensemble::{run_config, run_ensemble_with_threads, write_results, CompensatedSum};
use ahsse_core::sse::TrajectoryRecord;
use proptest::prelude::*;

fn small(preset: &str, n: usize) -> SimulationConfig {
    SimulationConfig::preset(preset)
        .unwrap()
        .with_overrides(&[
            format!("ensemble.n_trajectories={n}"),
            "grid.m=64".into(),
            "time.dt=0.01".into(),
            "time.t_final=0.5".into(),
            "time.sample_stride=10".into(),
            "output.histogram_bins=7".into(),
        ])
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn compensated_sum_is_partition_invariant(
        xs in proptest::collection::vec(-1e6f64..1e6, 2..200),
        cut in 0usize..200,
    ) {
        let cut = cut % xs.len();
        let mut whole = CompensatedSum::default();
        xs.iter().for_each(|&x| whole.add(x));
        let (mut a, mut b) = (CompensatedSum::default(), CompensatedSum::default());
        xs[..cut].iter().for_each(|&x| a.add(x));
        xs[cut..].iter().for_each(|&x| b.add(x));
        let mut merged = CompensatedSum::default();
        merged.add(a.value());
        merged.add(b.value());
        let scale = xs.iter().map(|x| x.abs()).sum::<f64>();
        prop_assert!((whole.value() - merged.value()).abs() <= 1e-12 * scale.max(1.0));
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let c = small("example2", 70);
    let a = run_ensemble_with_threads(&c, 1).unwrap();
    let b = run_ensemble_with_threads(&c, 8).unwrap();
    assert!(a.same_payload(&b));
    assert_eq!(a.metadata.threads, 1);
    assert_eq!(b.metadata.threads, 8);
}

#[test]
fn normalized_populations_and_ranges() {
    let c = small("example3", 20);
    let r = run_ensemble_with_threads(&c, 2).unwrap();
    assert_eq!(r.metadata.completed, 20);
    assert_eq!(r.metadata.aborted, 0);
    for k in 0..r.times.len() {
        assert!((r.p0_normalized.mean[k] + r.p1_normalized.mean[k] - 1.0).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&r.r.mean[k]));
        assert!((c.grid.a..=c.grid.b).contains(&r.x.mean[k]));
    }
    assert!(r.final_samples.windows(2).all(|w| w[0].trajectory_id < w[1].trajectory_id));
}

#[test]
fn artifacts_are_written_and_round_trip() {
    let mut c = small("sse_vs_qme", 6);
    c.output.snapshots = true;
    c.qme.as_mut().unwrap().dt = 0.1;
    let r = run_config(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_results(&r, dir.path()).unwrap();
    let mut names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "config.json",
            "final_samples.csv",
            "final_states.csv",
            "histogram_r.csv",
            "histogram_x.csv",
            "metadata.json",
            "qme.csv",
            "timeseries.csv"
        ]
    );
    let echo = SimulationConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(echo, c);
    for h in ["histogram_r.csv", "histogram_x.csv"] {
        let text = fs::read_to_string(dir.path().join(h)).unwrap();
        assert_eq!(text.lines().count(), 1 + 7, "{h}");
    }
    let ts = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
    assert_eq!(ts.lines().count(), 1 + r.times.len());
    let samples = fs::read_to_string(dir.path().join("final_samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 6);
    let states = fs::read_to_string(dir.path().join("final_states.csv")).unwrap();
    assert_eq!(states.lines().count(), 1 + 6 * 64);
    let qme = fs::read_to_string(dir.path().join("qme.csv")).unwrap();
    assert!(qme.starts_with("t,P0,P1,trace,purity"));
}

#[test]
fn empty_series_gives_header_only_csv() {
    let rec = TrajectoryRecord {
        samples: Vec::new(),
        snapshots: Vec::new(),
        final_state: ahsse_core::grid::uniform_state(&ahsse_core::grid::SpatialGrid::new(0.0, 1.0, 8).unwrap()),
    };
    let mut out = Vec::new();
    rec.write_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "t,R,X,norm0,norm1\n");
}

#[test]
fn io_failures_carry_the_path() {
    let r = run_ensemble_with_threads(&small("example1", 2), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let err = write_results(&r, &blocker.join("sub")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("file"));
}

#[test]
fn config_files_reject_unknown_fields() {
    let c = SimulationConfig::preset("example1").unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&c.echo_json().unwrap()).unwrap();
    v["grid"]["typo"] = serde_json::json!(1);
    let err = SimulationConfig::from_json(&v.to_string()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn presets_carry_the_reference_parameters() {
    let c = SimulationConfig::preset("example1").unwrap();
    assert_eq!(c.initial, InitialState::Gaussian { q0: -1.0, p0: 0.5 });
    assert_eq!((c.grid.a, c.grid.b), (-std::f64::consts::PI, std::f64::consts::PI));
    assert_eq!(c.time.t_final, 10.0);
    assert_eq!(c.physics.epsilon, 1.0 / 32.0);
    assert_eq!(c.ensemble.n_trajectories, 4000);
    assert!((c.coupling.eval(0.5) - (1.0 + (-40.0f64 * 6.25 - 1.0).exp())).abs() < 1e-12);
    let c = SimulationConfig::preset("example3").unwrap();
    assert_eq!(c.initial, InitialState::NonGaussian);
    let c = SimulationConfig::preset("sse_vs_qme").unwrap();
    assert_eq!((c.grid.a, c.grid.b), (-10.0, 10.0));
    assert_eq!(c.lambda_over_epsilon(), 0.25);
    let c = c.with_overrides(&["physics.lambda=0.03125"]).unwrap();
    let echo: serde_json::Value = serde_json::from_str(&c.echo_json().unwrap()).unwrap();
    assert_eq!(echo["derived"]["lambda_over_epsilon"], serde_json::json!(1.0));
}
