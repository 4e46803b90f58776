use std::fs;

use phaselab::dynamics::{Mode, RecordSchedule, RunConfig};
use phaselab::experiment::{
    run_experiment, ExperimentConfig, FigureTarget, RunStatus, Sweep, TRAJECTORY_HEADER,
};

fn small(id: &str, dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        run: RunConfig {
            d: 50,
            a: 1.5,
            seed: 3,
            eta: 1e-2,
            n_steps: 2000,
            record_schedule: RecordSchedule::LogSpaced(40),
            ..Default::default()
        },
        experiment_id: id.into(),
        output_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn empty_sweep_writes_one_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&small("single", tmp.path())).unwrap();
    assert_eq!(out.manifest.sweep_size, 1);
    assert_eq!(out.csv_paths().len(), 2);
    assert!(tmp.path().join("single_phases.csv").exists());
    assert!(out.manifest_path.exists());
    assert!(!out.any_diverged());
}

#[test]
fn trajectory_csv_has_header_and_full_precision() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&small("prec", tmp.path())).unwrap();
    let body = fs::read_to_string(&out.csv_paths()[0]).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next().unwrap(), TRAJECTORY_HEADER.join(","));
    let row: Vec<&str> = lines.nth(5).unwrap().split(',').collect();
    assert_eq!(row.len(), TRAJECTORY_HEADER.len());
    for field in &row[1..3] {
        let mantissa = field.trim_start_matches('-').split('e').next().unwrap();
        let digits = mantissa.chars().filter(|c| c.is_ascii_digit()).count();
        assert!(digits >= 15, "{field}");
        field.parse::<f64>().unwrap();
    }
}

#[test]
fn sweep_writes_one_file_per_point_and_manifest_parses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("grid", tmp.path());
    cfg.sweep = Sweep {
        a: vec![1.5, 3.0],
        seed: vec![0, 1],
        ..Default::default()
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.manifest.sweep_size, 4);
    assert_eq!(out.csv_paths().len(), 5);
    let raw = fs::read_to_string(&out.manifest_path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["runs"].as_array().unwrap().len(), 4);
    let phases = fs::read_to_string(tmp.path().join("grid_phases.csv")).unwrap();
    assert_eq!(phases.lines().count(), 5);
}

#[test]
fn divergence_is_recorded_and_partial_csv_kept() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("boom", tmp.path());
    cfg.run.eta = 50.0;
    cfg.run.record_schedule = RecordSchedule::Every(1);
    let out = run_experiment(&cfg).unwrap();
    assert!(out.any_diverged());
    let run = &out.manifest.runs[0];
    assert!(matches!(run.status, RunStatus::Diverged { .. }));
    assert!(run.truncated);
    let body = fs::read_to_string(&out.csv_paths()[0]).unwrap();
    assert!(body.lines().count() >= 2);
}

#[test]
fn identical_configs_give_identical_csv_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small("det", a.path());
    cfg.run.mode = Mode::Sgd;
    cfg.run.sgd_noise_sigma = 0.05;
    cfg.run.eta = 1e-3;
    cfg.figure_target = FigureTarget::None;
    let first = run_experiment(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    let second = run_experiment(&cfg).unwrap();
    for (p, q) in first.csv_paths().iter().zip(second.csv_paths()) {
        assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
    }
}
