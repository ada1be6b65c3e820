use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landscape::{self, Projection};
use crate::net::{Network, TaskId};
use crate::par::ExecMode;
use crate::probe::{write_results_csv, EvalRecord, Stage};
use crate::protocol::{fit_probes, run_protocol, with_probe_heads, ProtocolContext, ProtocolOptions};
use crate::saliency::Method;
use crate::synth::{self, rotate_roles, TaskParams, TaskSet};
use crate::trainer::{self, LossCurve};

use super::config::RunConfig;
use super::summarize::{summarize, write_summary_csv, ResultRow, SummaryRow};
use super::svg;

/// A sweep cell that produced no records.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub seed: u64,
    pub source: TaskId,
    pub method: Method,
    pub sparsity: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub records: Vec<EvalRecord>,
    pub heldout_records: Vec<EvalRecord>,
    pub summary: Vec<SummaryRow>,
    pub expected_rows: usize,
    pub failures: Vec<CellFailure>,
    pub leakage: u64,
    /// Largest `|realized − requested|` sparsity over completed cells.
    pub max_sparsity_error: f64,
    pub pretrain_accuracy: BTreeMap<u64, BTreeMap<TaskId, f64>>,
    /// `(seed, source, method, sparsity, layers)` for every collapsed cell.
    pub collapsed: Vec<(u64, TaskId, Method, f64, Vec<usize>)>,
}

struct JobResult {
    source: TaskId,
    method: Method,
    records: Vec<EvalRecord>,
    heldout: Vec<EvalRecord>,
    failures: Vec<(f64, String)>,
    leakage: u64,
    curves: Vec<(f64, LossCurve)>,
    realized: Vec<(f64, f64)>,
    collapsed: Vec<(f64, Vec<usize>)>,
    snapshot: Option<(Network, Network)>,
}

/// Task parameters for one run seed.
pub fn task_params(cfg: &RunConfig, seed: u64) -> TaskParams {
    TaskParams {
        seed: cfg.tasks.seed.wrapping_add(seed),
        ..cfg.tasks.clone()
    }
}

/// Generates the tasks and pre-trains the encoder for one seed.
pub fn pretrained(cfg: &RunConfig, seed: u64) -> Result<(TaskSet, trainer::PretrainReport)> {
    let tasks = synth::generate(&task_params(cfg, seed))?;
    let mut net = Network::mlp(&cfg.dims())?;
    net.init_he(&mut ChaCha8Rng::seed_from_u64(seed));
    let pairs: Vec<_> = tasks.tasks.iter().map(|t| (t.id, &t.train)).collect();
    trainer::init_heads(&mut net, &pairs, seed)?;
    let report = trainer::pretrain(net, &pairs, &cfg.pretrain, seed.wrapping_add(1))?;
    Ok((tasks, report))
}

/// Runs the full sweep and writes every artifact into `cfg.out_dir`.
pub fn run(cfg: &RunConfig, mode: ExecMode) -> Result<RunReport> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let fractions = cfg.sparsity_fractions();
    let landscape_q = fractions
        .iter()
        .copied()
        .min_by(|a, b| (a - 0.6642).abs().total_cmp(&(b - 0.6642).abs()))
        .expect("validated non-empty");
    let landscape_method = if cfg.methods.contains(&Method::BlockHessian) {
        Method::BlockHessian
    } else {
        cfg.methods[0]
    };
    let sources = cfg.source_tasks();
    let opts = ProtocolOptions {
        score: cfg.scoring.options(),
        retrain: cfg.retrain.clone(),
        apply_obs_update: cfg.apply_obs_update,
        report_heldout: cfg.report_heldout,
    };

    let mut report = RunReport {
        out_dir: out.clone(),
        records: Vec::new(),
        heldout_records: Vec::new(),
        summary: Vec::new(),
        expected_rows: cfg.expected_rows(),
        failures: Vec::new(),
        leakage: 0,
        max_sparsity_error: 0.0,
        pretrain_accuracy: BTreeMap::new(),
        collapsed: Vec::new(),
    };
    let mut curves_csv = String::from("seed,source,method,sparsity,epoch,loss,lr\n");

    for &seed in &cfg.seeds {
        log::info!("seed {seed}: generating tasks and pre-training");
        let (tasks, pre) = pretrained(cfg, seed)?;
        log::info!("seed {seed}: pre-training accuracy {:?}", pre.accuracy);
        let ckpt = out.join(format!("checkpoints/theta0_seed{seed}.txt"));
        let file = fs::File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let mut w = BufWriter::new(file);
        trainer::write_checkpoint(&mut w, &pre.net, seed, &cfg.pretrain)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&ckpt, e))?;
        let mut buf = Vec::new();
        pre.curve.write_csv(&mut buf).expect("in-memory write");
        write_file(&out.join(format!("pretrain_curve_seed{seed}.csv")), &buf)?;
        report.pretrain_accuracy.insert(seed, pre.accuracy.clone());

        let probes = fit_probes(&pre.net, &tasks, cfg.alpha)?;
        let net = with_probe_heads(&pre.net, &probes)?;
        let ctx = ProtocolContext {
            net: &net,
            tasks: &tasks,
            probes: &probes,
        };
        let baseline = ctx.baseline()?;

        let jobs: Vec<(TaskId, Method)> = sources
            .iter()
            .flat_map(|&s| cfg.methods.iter().map(move |&m| (s, m)))
            .collect();
        let results = mode.map_slice(&jobs, |&(source, method)| {
            let keep_snapshot = cfg.landscape_resolution > 0 && source == sources[0] && method == landscape_method;
            run_job(&ctx, source, method, &fractions, &opts, seed, &baseline, keep_snapshot.then_some(landscape_q))
        });

        let mut snapshot = None;
        for job in results {
            for (q, message) in &job.failures {
                report.failures.push(CellFailure {
                    seed,
                    source: job.source,
                    method: job.method,
                    sparsity: *q,
                    message: message.clone(),
                });
            }
            for (q, curve) in &job.curves {
                for (e, loss, lr) in &curve.points {
                    let _ = writeln!(curves_csv, "{seed},{},{},{q:.6},{e},{loss:.9e},{lr}", job.source, job.method);
                }
            }
            for (q, realized) in &job.realized {
                report.max_sparsity_error = report.max_sparsity_error.max((q - realized).abs());
            }
            for (q, layers) in job.collapsed {
                report.collapsed.push((seed, job.source, job.method, q, layers));
            }
            report.leakage += job.leakage;
            report.records.extend(job.records);
            report.heldout_records.extend(job.heldout);
            if job.snapshot.is_some() {
                snapshot = job.snapshot;
            }
        }

        if let Some((pruned, finetuned)) = snapshot {
            let roles = rotate_roles(&tasks, sources[0])?;
            let transfer = roles.transfer[0];
            match network_landscape(&net, &tasks, roles.source, transfer, &pruned, &finetuned, cfg.landscape_resolution, mode) {
                Ok(proj) => {
                    let mut buf = Vec::new();
                    proj.write_csv(&mut buf, &["theta0", "pruned", "retrained"]).expect("in-memory write");
                    write_file(&out.join(format!("landscape_seed{seed}.csv")), &buf)?;
                    let meta = format!(
                        "method = \"{landscape_method}\"\nsparsity = {landscape_q}\nsource_task = {}\ntransfer_task = {transfer}\n\
                         loss_batches = \"train split of each task, evaluated with its frozen probe head\"\n\
                         resolution = {}\nexplained_variance = [{:e}, {:e}]\n",
                        roles.source, proj.resolution, proj.explained[0], proj.explained[1]
                    );
                    write_file(&out.join(format!("landscape_seed{seed}.meta")), meta.as_bytes())?;
                    write_file(&out.join(format!("landscape_seed{seed}.svg")), svg::loss_heatmap(&proj, false).as_bytes())?;
                }
                Err(e) => log::warn!("seed {seed}: landscape skipped: {e}"),
            }
        }
    }

    let mut buf = Vec::new();
    write_results_csv(&mut buf, &report.records).expect("in-memory write");
    write_file(&out.join("results.csv"), &buf)?;
    if cfg.report_heldout {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &report.heldout_records).expect("in-memory write");
        write_file(&out.join("results_heldout.csv"), &buf)?;
    }
    write_file(&out.join("loss_curves.csv"), curves_csv.as_bytes())?;

    let rows: Vec<ResultRow> = report.records.iter().map(ResultRow::from).collect();
    report.summary = summarize(&rows);
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &report.summary).expect("in-memory write");
    write_file(&out.join("summary.csv"), &buf)?;
    write_file(&out.join("summary.svg"), svg::transfer_bars(&report.summary, Stage::PrunedFinetuned).as_bytes())?;
    write_file(&out.join("summary.txt"), summary_text(cfg, &report).as_bytes())?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_job(
    ctx: &ProtocolContext<'_>,
    source: TaskId,
    method: Method,
    fractions: &[f64],
    opts: &ProtocolOptions,
    seed: u64,
    baseline: &crate::protocol::Baseline,
    snapshot_q: Option<f64>,
) -> JobResult {
    let mut job = JobResult {
        source,
        method,
        records: Vec::new(),
        heldout: Vec::new(),
        failures: Vec::new(),
        leakage: 0,
        curves: Vec::new(),
        realized: Vec::new(),
        collapsed: Vec::new(),
        snapshot: None,
    };
    let outcome = rotate_roles(ctx.tasks, source)
        .and_then(|roles| run_protocol(ctx, &roles, method, fractions, opts, seed, Some(baseline)));
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            log::warn!("source {source} method {method} failed: {e}");
            job.failures = fractions.iter().map(|&q| (q, e.to_string())).collect();
            return job;
        }
    };
    job.records = outcome.records;
    job.heldout = outcome.heldout_records;
    job.failures = outcome.failures;
    job.leakage = outcome.leakage;
    for cell in outcome.cells {
        job.realized.push((cell.sparsity, cell.realized_sparsity));
        if !cell.collapsed_layers.is_empty() {
            job.collapsed.push((cell.sparsity, cell.collapsed_layers));
        }
        if snapshot_q == Some(cell.sparsity) {
            job.snapshot = Some((cell.pruned, cell.finetuned));
        }
        job.curves.push((cell.sparsity, cell.curve));
    }
    job
}

/// Principal-plane loss surface through `[θ₀, θ̃₀, θ̃*_s]`, evaluated on the
/// train splits of the source and one transfer task with their probe heads.
#[allow(clippy::too_many_arguments)]
pub fn network_landscape(
    net: &Network,
    tasks: &TaskSet,
    source: TaskId,
    transfer: TaskId,
    pruned: &Network,
    finetuned: &Network,
    resolution: usize,
    mode: ExecMode,
) -> Result<Projection> {
    let snaps = vec![net.weights().to_vec(), pruned.weights().to_vec(), finetuned.weights().to_vec()];
    let (sb, tb) = (&tasks.task(source)?.train, &tasks.task(transfer)?.train);
    landscape::pca_project(&snaps, resolution, mode, |w| {
        let at = net.with_weights(w.to_vec()).expect("snapshot length matches");
        let loss = |b, t| at.loss(b, t).unwrap_or(f64::NAN);
        (loss(sb, source), loss(tb, transfer))
    })
}

fn summary_text(cfg: &RunConfig, r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "rows: {} of {} expected", r.records.len(), r.expected_rows);
    let _ = writeln!(s, "seeds: {:?}", cfg.seeds);
    let _ = writeln!(s, "methods: {}", cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", "));
    let _ = writeln!(s, "transfer leakage: {}{}", r.leakage, if r.leakage == 0 { "" } else { "  <-- VIOLATION" });
    let _ = writeln!(s, "max realized sparsity error: {:.3e}", r.max_sparsity_error);
    for (seed, acc) in &r.pretrain_accuracy {
        let mean = acc.values().sum::<f64>() / acc.len().max(1) as f64;
        let _ = writeln!(s, "pre-training accuracy, seed {seed}: mean {mean:.4}");
    }
    let _ = writeln!(s, "incomplete cells: {}", r.failures.len());
    for f in &r.failures {
        let _ = writeln!(s, "  seed={} source={} method={} sparsity={:.4}: {}", f.seed, f.source, f.method, f.sparsity, f.message);
    }
    let _ = writeln!(s, "cells with layer collapse: {}", r.collapsed.len());
    for (seed, src, m, q, layers) in &r.collapsed {
        let _ = writeln!(s, "  seed={seed} source={src} method={m} sparsity={q:.4}: layers {layers:?}");
    }
    let _ = writeln!(s, "\nmean accuracy (std) by method, sparsity, role, stage:");
    for row in &r.summary {
        let _ = writeln!(
            s,
            "  {:<10} {:>7.2}% {:<8} {:<16} {:.4} ({:.4}) n={}",
            row.method,
            row.sparsity * 100.0,
            row.role.name(),
            row.stage.name(),
            row.mean,
            row.std,
            row.count
        );
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
