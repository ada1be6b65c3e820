//! Source-guided pruning with zero-shot transfer evaluation.
//!
//! Probes are fitted once on the unpruned encoder and stay frozen. For a
//! source task and a scoring method, the encoder is scored and masked using
//! source data only, evaluated on every task (pruned stage), re-trained on
//! the source task, and evaluated again (pruned-and-finetuned stage).
//!
//! Task data is reached through [`TaskAccess`], which counts reads per task
//! and phase. Every read of a non-source task during the calibration phase
//! (scoring, masking, re-training) shows up as leakage.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hessian::{self, KronInverse};
use crate::masking::{apply_mask, keep_count, topk_mask, PruneMask};
use crate::net::{Batch, Network, TaskId};
use crate::probe::{evaluate, EvalRecord, ProbeClassifier, Role, Stage};
use crate::saliency::{self, Method, ObsCurvature, ScoreOptions, ScoreVector};
use crate::synth::{Roles, TaskSet};
use crate::trainer::{retrain, LossCurve, SgdSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Scoring, masking and re-training: only the source task may be read.
    Calibration,
    Evaluation,
}

/// Read-counting view over a task set.
#[derive(Debug)]
pub struct TaskAccess<'a> {
    tasks: &'a TaskSet,
    source: TaskId,
    calibration_reads: RefCell<Vec<u64>>,
    evaluation_reads: RefCell<Vec<u64>>,
}

impl<'a> TaskAccess<'a> {
    pub fn new(tasks: &'a TaskSet, source: TaskId) -> Self {
        Self {
            tasks,
            source,
            calibration_reads: RefCell::new(vec![0; tasks.len()]),
            evaluation_reads: RefCell::new(vec![0; tasks.len()]),
        }
    }

    pub fn train(&self, task: TaskId, phase: Phase) -> Result<&'a Batch> {
        let t = self.tasks.task(task)?;
        self.count(task, phase);
        Ok(&t.train)
    }

    pub fn eval(&self, task: TaskId, phase: Phase) -> Result<&'a Batch> {
        let t = self.tasks.task(task)?;
        self.count(task, phase);
        Ok(&t.eval)
    }

    fn count(&self, task: TaskId, phase: Phase) {
        let cell = match phase {
            Phase::Calibration => &self.calibration_reads,
            Phase::Evaluation => &self.evaluation_reads,
        };
        cell.borrow_mut()[task] += 1;
    }

    /// Calibration-phase reads of tasks other than the source.
    pub fn leakage(&self) -> u64 {
        self.calibration_reads
            .borrow()
            .iter()
            .enumerate()
            .filter(|&(t, _)| t != self.source)
            .map(|(_, &n)| n)
            .sum()
    }

    pub fn calibration_reads(&self, task: TaskId) -> u64 {
        self.calibration_reads.borrow()[task]
    }

    pub fn evaluation_reads(&self, task: TaskId) -> u64 {
        self.evaluation_reads.borrow()[task]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProtocolOptions {
    pub score: ScoreOptions,
    pub retrain: SgdSchedule,
    /// Apply the summed single-weight OBS corrections before re-training
    /// (block and exact curvature only).
    pub apply_obs_update: bool,
    /// Also evaluate on each task's held-out split.
    pub report_heldout: bool,
}

/// Unpruned accuracies, shared by every method and sparsity.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub train: BTreeMap<TaskId, f64>,
    pub heldout: BTreeMap<TaskId, f64>,
}

/// The pre-trained encoder together with its frozen probes.
#[derive(Debug, Clone)]
pub struct ProtocolContext<'a> {
    /// Encoder with every probe installed as the head of its task.
    pub net: &'a Network,
    pub tasks: &'a TaskSet,
    pub probes: &'a BTreeMap<TaskId, ProbeClassifier>,
}

impl<'a> ProtocolContext<'a> {
    pub fn baseline(&self) -> Result<Baseline> {
        let mut train = BTreeMap::new();
        let mut heldout = BTreeMap::new();
        for task in &self.tasks.tasks {
            let probe = self.probe(task.id)?;
            train.insert(task.id, evaluate(self.net, probe, &task.train)?);
            heldout.insert(task.id, evaluate(self.net, probe, &task.eval)?);
        }
        Ok(Baseline { train, heldout })
    }

    fn probe(&self, task: TaskId) -> Result<&'a ProbeClassifier> {
        self.probes.get(&task).ok_or(Error::UnknownTask(task))
    }
}

/// Installs each probe as its task's head on a copy of `net`.
pub fn with_probe_heads(net: &Network, probes: &BTreeMap<TaskId, ProbeClassifier>) -> Result<Network> {
    let mut out = net.clone();
    for (&task, probe) in probes {
        out.set_head(task, probe.head.clone())?;
    }
    Ok(out)
}

/// Fits one ridge probe per task on the unpruned features of its train split.
pub fn fit_probes(net: &Network, tasks: &TaskSet, alpha: f64) -> Result<BTreeMap<TaskId, ProbeClassifier>> {
    tasks
        .tasks
        .iter()
        .map(|t| Ok((t.id, ProbeClassifier::fit(net, &t.train, t.id, alpha)?)))
        .collect()
}

/// Result of one sparsity level.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub sparsity: f64,
    pub realized_sparsity: f64,
    pub collapsed_layers: Vec<usize>,
    pub pruned: Network,
    pub finetuned: Network,
    pub curve: LossCurve,
}

#[derive(Debug)]
pub struct ProtocolOutcome {
    pub records: Vec<EvalRecord>,
    pub heldout_records: Vec<EvalRecord>,
    pub cells: Vec<CellOutcome>,
    /// `(sparsity, message)` for every cell that failed.
    pub failures: Vec<(f64, String)>,
    pub leakage: u64,
    pub scores: Option<ScoreVector>,
}

/// Runs the three-stage evaluation for one source task and one method over
/// a sparsity grid (fractions in `[0, 1)`).
pub fn run_protocol(
    ctx: &ProtocolContext<'_>,
    roles: &Roles,
    method: Method,
    sparsities: &[f64],
    opts: &ProtocolOptions,
    seed: u64,
    baseline: Option<&Baseline>,
) -> Result<ProtocolOutcome> {
    let owned;
    let baseline = match baseline {
        Some(b) => b,
        None => {
            owned = ctx.baseline()?;
            &owned
        }
    };
    let access = TaskAccess::new(ctx.tasks, roles.source);
    let order = task_order(roles);
    let mut out = ProtocolOutcome {
        records: Vec::new(),
        heldout_records: Vec::new(),
        cells: Vec::new(),
        failures: Vec::new(),
        leakage: 0,
        scores: None,
    };
    let record = |task: TaskId, role: Role, stage: Stage, q: f64, accuracy: f64| EvalRecord {
        method,
        sparsity: q,
        task,
        role,
        stage,
        accuracy,
        seed,
    };
    for &(task, role) in &order {
        out.records.push(record(task, role, Stage::Unpruned, 0.0, baseline.train[&task]));
        if opts.report_heldout {
            out.heldout_records
                .push(record(task, role, Stage::Unpruned, 0.0, baseline.heldout[&task]));
        }
    }

    let source_batch = access.train(roles.source, Phase::Calibration)?;
    // A cell that keeps every weight needs no scores, so it survives a
    // scoring failure.
    let scores = saliency::score_network(method, ctx.net, source_batch, roles.source, &opts.score)
        .map(|s| s.with_provenance(roles.source, seed));
    let p = ctx.net.param_count();

    for (qi, &q) in sparsities.iter().enumerate() {
        let cell_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((roles.source as u64) << 32)
            .wrapping_add(((method as u64) << 16) + qi as u64);
        let mask = match &scores {
            Ok(s) => topk_mask(s, q),
            Err(_) if keep_count(p, q) == p => {
                let mut mask = PruneMask::from_bits(vec![true; p], q);
                mask.method = Some(method);
                Ok(mask)
            }
            Err(e) => Err(Error::InvalidArgument(format!("scoring failed: {e}"))),
        };
        match mask.and_then(|mask| run_cell(ctx, &access, roles, method, &mask, opts, cell_seed)) {
            Ok(cell) => {
                for (stage, net) in [(Stage::Pruned, &cell.pruned), (Stage::PrunedFinetuned, &cell.finetuned)] {
                    for &(task, role) in &order {
                        let probe = ctx.probe(task)?;
                        let acc = evaluate(net, probe, access.train(task, Phase::Evaluation)?)?;
                        out.records.push(record(task, role, stage, q, acc));
                        if opts.report_heldout {
                            let acc = evaluate(net, probe, access.eval(task, Phase::Evaluation)?)?;
                            out.heldout_records.push(record(task, role, stage, q, acc));
                        }
                    }
                }
                out.cells.push(cell);
            }
            Err(e) => {
                log::warn!("cell source={} method={method} q={q} failed: {e}", roles.source);
                out.failures.push((q, e.to_string()));
            }
        }
    }
    out.leakage = access.leakage();
    out.scores = scores.ok();
    Ok(out)
}

fn task_order(roles: &Roles) -> Vec<(TaskId, Role)> {
    let mut order = vec![(roles.source, Role::Source)];
    order.extend(roles.transfer.iter().map(|&t| (t, Role::Transfer)));
    order.sort_by_key(|&(t, _)| t);
    order
}

fn run_cell(
    ctx: &ProtocolContext<'_>,
    access: &TaskAccess<'_>,
    roles: &Roles,
    method: Method,
    mask: &PruneMask,
    opts: &ProtocolOptions,
    seed: u64,
) -> Result<CellOutcome> {
    let collapsed_layers = mask.collapsed_layers(ctx.net);
    if !collapsed_layers.is_empty() {
        log::warn!(
            "layer collapse at q={} for {method}: layers {collapsed_layers:?} lost every weight",
            mask.sparsity()
        );
    }
    let pruned = apply_mask(ctx.net, mask)?;
    let source_batch = access.train(roles.source, Phase::Calibration)?;
    let start = if opts.apply_obs_update {
        obs_corrected(ctx.net, mask, source_batch, roles.source, method, &opts.score)?
    } else {
        pruned.clone()
    };
    let report = retrain(&start, mask, source_batch, roles.source, &opts.retrain, seed)?;
    Ok(CellOutcome {
        sparsity: mask.sparsity(),
        realized_sparsity: mask.realized_sparsity(),
        collapsed_layers,
        pruned,
        finetuned: report.net,
        curve: report.curve,
    })
}

/// Sums the single-weight OBS corrections of every pruned weight, then
/// re-applies the mask. Methods without usable curvature are left as pruned.
fn obs_corrected(
    net: &Network,
    mask: &PruneMask,
    batch: &Batch,
    task: TaskId,
    method: Method,
    opts: &ScoreOptions,
) -> Result<Network> {
    let w = net.weights();
    let mut total = vec![0.0; w.len()];
    let pruned: Vec<usize> = (0..w.len()).filter(|&j| !mask.bits()[j]).collect();
    match method {
        Method::BlockHessian => {
            let inv = KronInverse::new(&hessian::kfac_factors(net, batch, task)?, opts.block_damping)?;
            for &j in &pruned {
                let d = saliency::obs_update(w, ObsCurvature::Blocks(&inv), j)?;
                total.iter_mut().zip(&d).for_each(|(t, v)| *t += v);
            }
        }
        Method::ExactObs => {
            let h = hessian::exact_hessian(net, batch, task, opts.exact_cap, crate::ExecMode::Sequential)?;
            let inv = saliency::damped_inverse(&h.matrix, opts.exact_damping)?;
            for &j in &pruned {
                let d = saliency::obs_update(w, ObsCurvature::DenseInverse(&inv), j)?;
                total.iter_mut().zip(&d).for_each(|(t, v)| *t += v);
            }
        }
        _ => return apply_mask(net, mask),
    }
    let updated: Vec<f64> = w.iter().zip(&total).map(|(a, b)| a + b).collect();
    apply_mask(&net.with_weights(updated)?, mask)
}
