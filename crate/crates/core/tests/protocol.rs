use std::collections::BTreeMap;

use prunelab::experiment::{self, summarize, RunConfig};
use prunelab::probe::{Role, Stage};
use prunelab::protocol::{fit_probes, run_protocol, with_probe_heads, ProtocolContext, ProtocolOptions};
use prunelab::saliency::Method;
use prunelab::synth::rotate_roles;
use prunelab::ExecMode;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::from_toml(include_str!("../../../configs/smoke.toml")).unwrap();
    cfg.tasks.dim = 16;
    cfg.tasks.rho = 1.0;
    cfg.landscape_resolution = 5;
    cfg
}

#[test]
fn zero_sparsity_reproduces_unpruned_and_probes_stay_frozen() {
    let cfg = small_config();
    let (tasks, pre) = experiment::run::pretrained(&cfg, 4).unwrap();
    let probes = fit_probes(&pre.net, &tasks, cfg.alpha).unwrap();
    let frozen = probes.clone();
    let net = with_probe_heads(&pre.net, &probes).unwrap();
    let ctx = ProtocolContext { net: &net, tasks: &tasks, probes: &probes };
    let baseline = ctx.baseline().unwrap();
    let opts = ProtocolOptions { retrain: cfg.retrain.clone(), report_heldout: true, ..Default::default() };
    let roles = rotate_roles(&tasks, 1).unwrap();

    for method in [Method::Magnitude, Method::DiagHessian, Method::BlockHessian, Method::Snip, Method::Grasp] {
        let out = run_protocol(&ctx, &roles, method, &[0.0, 0.5], &opts, 4, Some(&baseline)).unwrap();
        assert!(out.failures.is_empty(), "{method}: {:?}", out.failures);
        assert_eq!(out.leakage, 0);
        assert_eq!(out.records.len(), tasks.len() * 5);
        let unpruned: BTreeMap<_, _> = out
            .records
            .iter()
            .filter(|r| r.stage == Stage::Unpruned)
            .map(|r| (r.task, r.accuracy))
            .collect();
        for r in out.records.iter().filter(|r| r.stage == Stage::Pruned && r.sparsity == 0.0) {
            assert_eq!(r.accuracy, unpruned[&r.task], "{method} task {}", r.task);
        }
        assert_eq!(out.cells[0].pruned.weights(), net.weights());
        // retraining touches encoder weights only
        for cell in &out.cells {
            assert_eq!(cell.finetuned.heads(), net.heads());
        }
        let sources = out.records.iter().filter(|r| r.role == Role::Source).count();
        assert_eq!(sources, 5);
        assert!(out.records.iter().filter(|r| r.role == Role::Source).all(|r| r.task == 1));
    }
    assert_eq!(probes, frozen);
}

#[test]
fn unpruned_stage_is_shared_across_methods() {
    let cfg = small_config();
    let (tasks, pre) = experiment::run::pretrained(&cfg, 2).unwrap();
    let probes = fit_probes(&pre.net, &tasks, cfg.alpha).unwrap();
    let net = with_probe_heads(&pre.net, &probes).unwrap();
    let ctx = ProtocolContext { net: &net, tasks: &tasks, probes: &probes };
    let opts = ProtocolOptions { retrain: cfg.retrain.clone(), ..Default::default() };
    let roles = rotate_roles(&tasks, 0).unwrap();
    let first: Vec<f64> = run_protocol(&ctx, &roles, Method::Magnitude, &[0.3], &opts, 2, None)
        .unwrap()
        .records
        .iter()
        .filter(|r| r.stage == Stage::Unpruned)
        .map(|r| r.accuracy)
        .collect();
    let second: Vec<f64> = run_protocol(&ctx, &roles, Method::Grasp, &[0.6], &opts, 2, None)
        .unwrap()
        .records
        .iter()
        .filter(|r| r.stage == Stage::Unpruned)
        .map(|r| r.accuracy)
        .collect();
    assert_eq!(first, second);
}

#[test]
fn run_writes_expected_rows_without_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.out_dir = dir.path().join("out");
    let report = experiment::run(&cfg, ExecMode::Parallel).unwrap();
    assert_eq!(report.records.len(), report.expected_rows);
    // seeds × rotations × methods × (1 + 2·grid) × tasks, with one seed
    assert_eq!(report.expected_rows, 2 * 3 * (1 + 2 * 3) * 4);
    assert_eq!(report.leakage, 0);
    assert!(report.failures.is_empty());
    assert!(report.max_sparsity_error < 1e-3);
    for name in ["results.csv", "results_heldout.csv", "summary.csv", "summary.txt", "config.toml", "loss_curves.csv"] {
        assert!(cfg.out_dir.join(name).is_file(), "{name}");
    }
    // the written config reloads to the same settings
    let reloaded = RunConfig::load(&cfg.out_dir.join("config.toml")).unwrap();
    assert_eq!(reloaded.to_toml(), cfg.to_toml());

    let rows = summarize::summarize_file(&cfg.out_dir.join("results.csv")).unwrap();
    assert_eq!(rows, summarize::summarize_file(&cfg.out_dir.join("results.csv")).unwrap());
    assert_eq!(rows, report.summary);
}

#[test]
fn sequential_and_parallel_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.rotations = vec![2];
    cfg.out_dir = dir.path().join("seq");
    experiment::run(&cfg, ExecMode::Sequential).unwrap();
    cfg.out_dir = dir.path().join("par");
    experiment::run(&cfg, ExecMode::Parallel).unwrap();
    for name in ["results.csv", "summary.csv", "loss_curves.csv"] {
        let a = std::fs::read(dir.path().join("seq").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("par").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn only_zero_sparsity_config_is_all_unpruned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.sparsities = vec![0.0];
    cfg.rotations = vec![0];
    cfg.out_dir = dir.path().to_path_buf();
    let report = experiment::run(&cfg, ExecMode::Parallel).unwrap();
    assert_eq!(report.records.len(), cfg.expected_rows());
    for method in &cfg.methods {
        let base: BTreeMap<_, _> = report
            .records
            .iter()
            .filter(|r| r.method == *method && r.stage == Stage::Unpruned)
            .map(|r| (r.task, r.accuracy))
            .collect();
        for r in report.records.iter().filter(|r| r.method == *method && r.stage == Stage::Pruned) {
            assert_eq!(r.accuracy, base[&r.task]);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "sparsities = [50.0, 40.0]",
        "sparsities = [100.0]",
        "seeds = []",
        "methods = []",
        "methods = [\"magnitude\", \"magnitude\"]",
        "alpha = 0.0",
        "bogus = 1",
        "rotations = [99]",
    ] {
        assert!(RunConfig::from_toml(text).is_err(), "{text}");
    }
}
