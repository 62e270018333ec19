use std::path::{Path, PathBuf};

use crcl_core::experiment::checkpoint_path;
use crcl_core::stream::synth::{write_dataset, SynthConfig};
use crcl_core::stream::TaskOrder;
use crcl_core::{run_experiment, Error, ExperimentConfig, Method, Report, RunOptions};
use tempfile::TempDir;

fn dataset(dir: &Path) -> PathBuf {
    let synth = SynthConfig {
        classes: 4,
        train_per_class: 30,
        test_per_class: 10,
        height: 12,
        width: 12,
        ..SynthConfig::default()
    };
    write_dataset(&dir.join("data"), &synth).unwrap()
}

fn small_config(manifest: &Path, out: &Path, tasks: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        manifest: Some(manifest.to_path_buf()),
        output: out.to_path_buf(),
        seed: 3,
        ..ExperimentConfig::default()
    };
    cfg.tasks.num_tasks = tasks;
    cfg.tasks.order = TaskOrder::Given;
    cfg.backbone.hidden_dim = 32;
    cfg.backbone.embed_dim = 16;
    cfg.backbone.adapter_dim = 8;
    cfg.train.epochs_first = 2;
    cfg.train.epochs_later = 2;
    cfg.train.batch_size = 16;
    cfg
}

fn run(cfg: &ExperimentConfig) -> Report {
    run_experiment(cfg, &RunOptions::default(), |_| {}).unwrap()
}

#[test]
fn single_task_uses_only_the_conservative_learner() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dataset(dir.path()), &dir.path().join("out"), 1);
    let report = run(&cfg);
    assert_eq!(report.sessions.len(), 1);
    assert!(report.sessions[0].fused_fraction.is_none());
    assert!(report.beta.is_some());
    assert_eq!(report.acc_avg, Some(report.acc_last));
}

#[test]
fn per_session_accuracies_average_to_acc_avg() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dataset(dir.path()), &dir.path().join("out"), 4);
    let mut seen = Vec::new();
    let report = run_experiment(&cfg, &RunOptions::default(), |r| seen.push(r.clone())).unwrap();
    assert_eq!(report.sessions, seen);
    assert_eq!(report.sessions.len(), 4);
    let acc: Vec<f64> = report.sessions.iter().map(|r| r.accuracy).collect();
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    assert!((report.acc_avg.unwrap() - mean).abs() < 1e-12);
    assert_eq!(report.acc_last, acc[3]);
    assert!(acc.iter().all(|a| (0.0..=100.0).contains(a)));
    assert!(report.sessions[1..].iter().all(|r| r.theta_div.is_some()));

    let csv = std::fs::read_to_string(cfg.output.join("sessions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for t in 1..=4 {
        assert!(checkpoint_path(&cfg.output, t).is_file());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path());
    let full = run(&small_config(&manifest, &dir.path().join("full"), 4));

    let cfg = small_config(&manifest, &dir.path().join("split"), 4);
    let opts = RunOptions {
        stop_after: Some(2),
        ..RunOptions::default()
    };
    let partial = run_experiment(&cfg, &opts, |_| {}).unwrap();
    assert_eq!(partial.sessions.len(), 2);
    let opts = RunOptions {
        resume: Some(checkpoint_path(&cfg.output, 2)),
        ..RunOptions::default()
    };
    let resumed = run_experiment(&cfg, &opts, |_| {}).unwrap();
    assert_eq!(resumed.sessions, full.sessions);
    assert_eq!(resumed.acc_avg, full.acc_avg);
    assert_eq!(resumed.beta, full.beta);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path());
    let cfg = small_config(&manifest, &dir.path().join("a"), 3);
    run_experiment(&cfg, &RunOptions { stop_after: Some(1), ..RunOptions::default() }, |_| {}).unwrap();
    let other = ExperimentConfig { seed: 4, ..cfg.clone() };
    let opts = RunOptions {
        resume: Some(checkpoint_path(&cfg.output, 1)),
        ..RunOptions::default()
    };
    assert!(run_experiment(&other, &opts, |_| {}).is_err());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dataset(dir.path()), &dir.path().join("out"), 2);
    let first = run(&cfg);
    let echoed = ExperimentConfig::from_text(&first.config, dir.path()).unwrap();
    assert_eq!(echoed, cfg);
    let first_json = std::fs::read(cfg.output.join("report.json")).unwrap();
    let second = run(&echoed);
    assert_eq!(second.sessions, first.sessions);
    assert_eq!(std::fs::read(cfg.output.join("report.json")).unwrap(), first_json);
}

#[test]
fn baselines_agree_on_a_single_task() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path());
    let mut cfg = small_config(&manifest, &dir.path().join("ft"), 1);
    cfg.method = Method::Finetune;
    let finetune = run(&cfg);
    cfg.method = Method::Joint;
    cfg.output = dir.path().join("joint");
    let joint = run(&cfg);
    assert_eq!(finetune.acc_last, joint.acc_last);
    assert_eq!(joint.acc_avg, None);
    assert_eq!(finetune.beta, None);
}

#[test]
fn finetune_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(&dataset(dir.path()), &dir.path().join("out"), 2);
    cfg.method = Method::Finetune;
    assert_eq!(run(&cfg).sessions, run(&cfg).sessions);
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir.path().join("nope.txt"), &dir.path().join("out"), 2);
    let err = run_experiment(&cfg, &RunOptions::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::InvalidParameter(ref m) if m.contains("manifest")), "{err}");
}
