//! SGD with momentum for pre-training the shared encoder and for re-training
//! pruned encoders under a fixed mask.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::masking::PruneMask;
use crate::net::{Batch, Head, LayerSpec, Network, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Stop early once the full-batch gradient norm drops below this.
    pub grad_tol: f64,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self {
            epochs: 90,
            lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![30, 60, 80],
            decay_factor: 0.1,
            batch_size: 50,
            grad_tol: 0.0,
        }
    }
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing".into());
        }
        if self.epochs > 0 && self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay epochs must precede the final epoch".into());
        }
        Ok(())
    }

    /// Same schedule over `epochs`, with decay points rescaled proportionally.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let mut out = self.clone();
        if self.epochs > 0 && epochs != self.epochs {
            let mut decay: Vec<usize> = self
                .decay_epochs
                .iter()
                .map(|&e| (e * epochs + self.epochs / 2) / self.epochs)
                .filter(|&e| e > 0 && e < epochs)
                .collect();
            decay.dedup();
            out.decay_epochs = decay;
        }
        out.epochs = epochs;
        out
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }

    pub fn describe(&self) -> String {
        let decay: Vec<String> = self.decay_epochs.iter().map(usize::to_string).collect();
        format!(
            "epochs={} lr={} momentum={} weight_decay={} decay_epochs={} decay_factor={} batch_size={}",
            self.epochs,
            self.lr,
            self.momentum,
            self.weight_decay,
            decay.join(","),
            self.decay_factor,
            self.batch_size
        )
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub points: Vec<(usize, f64, f64)>,
}

impl LossCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,lr")?;
        for (e, loss, lr) in &self.points {
            writeln!(w, "{e},{loss:.9e},{lr}")?;
        }
        Ok(())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub net: Network,
    /// Training accuracy of each task under its own training head.
    pub accuracy: BTreeMap<TaskId, f64>,
    pub grad_norm: f64,
    pub epochs_run: usize,
    pub curve: LossCurve,
}

#[derive(Debug, Clone)]
pub struct RetrainReport {
    pub net: Network,
    pub curve: LossCurve,
}

struct Momentum {
    velocity: Vec<f64>,
}

impl Momentum {
    fn new(n: usize) -> Self {
        Self {
            velocity: vec![0.0; n],
        }
    }

    /// `v ← μv + (g + λw)`, `w ← w − lr·v`, restricted to `keep` when given.
    fn step(&mut self, w: &mut [f64], g: &[f64], keep: Option<&[bool]>, s: &SgdSchedule, lr: f64) {
        for j in 0..w.len() {
            if keep.is_some_and(|k| !k[j]) {
                continue;
            }
            let v = s.momentum * self.velocity[j] + g[j] + s.weight_decay * w[j];
            self.velocity[j] = v;
            w[j] -= lr * v;
        }
    }
}

/// Gives every task a small random head (`N(0, 1/h)`) for pre-training.
pub fn init_heads(net: &mut Network, tasks: &[(TaskId, &Batch)], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
    let h = net.feature_dim();
    let normal = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid std");
    for &(task, batch) in tasks {
        let values = (0..h * batch.classes()).map(|_| normal.sample(&mut rng)).collect();
        net.set_head(task, Head::new(h, batch.classes(), values)?)?;
    }
    Ok(())
}

/// Multi-head supervised training of the encoder and all heads on the union
/// of the given task datasets.
pub fn pretrain(
    mut net: Network,
    tasks: &[(TaskId, &Batch)],
    schedule: &SgdSchedule,
    seed: u64,
) -> Result<PretrainReport> {
    schedule.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("pre-training needs at least one task".into()));
    }
    for &(task, _) in tasks {
        net.head(task)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(slot, (_, b))| (0..b.len()).map(move |i| (slot, i)))
        .collect();
    let mut enc_mom = Momentum::new(net.param_count());
    let mut head_mom: Vec<Momentum> = tasks
        .iter()
        .map(|&(t, _)| Momentum::new(net.head(t).map(|h| h.values.len()).unwrap_or(0)))
        .collect();
    let mut curve = LossCurve::default();
    let mut grad_norm = full_grad_norm(&net, tasks)?;
    let mut epochs_run = 0;
    for epoch in 0..schedule.epochs {
        if grad_norm < schedule.grad_tol {
            break;
        }
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(slot, i) in chunk {
                groups.entry(slot).or_default().push(i);
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut enc_grad = vec![0.0; net.param_count()];
            let mut head_grads = Vec::with_capacity(groups.len());
            for (&slot, idx) in &groups {
                let (task, batch) = tasks[slot];
                let sub = batch.select(idx);
                let (loss, g, hg) = net.backprop_sum(&sub, task, true)?;
                loss_sum += loss * idx.len() as f64;
                for (acc, v) in enc_grad.iter_mut().zip(&g) {
                    *acc += v * scale;
                }
                let hg: Vec<f64> = hg.expect("requested").iter().map(|v| v * scale).collect();
                head_grads.push((slot, hg));
            }
            enc_mom.step(net.weights_mut(), &enc_grad, None, schedule, lr);
            for (slot, hg) in head_grads {
                let task = tasks[slot].0;
                let mut head = net.head(task)?.clone();
                head_mom[slot].step(&mut head.values, &hg, None, schedule, lr);
                net.set_head(task, head)?;
            }
        }
        let epoch_loss = loss_sum / order.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        curve.points.push((epoch, epoch_loss, lr));
        epochs_run = epoch + 1;
        grad_norm = full_grad_norm(&net, tasks)?;
    }
    let mut accuracy = BTreeMap::new();
    for &(task, batch) in tasks {
        accuracy.insert(task, head_accuracy(&net, batch, task)?);
    }
    Ok(PretrainReport {
        net,
        accuracy,
        grad_norm,
        epochs_run,
        curve,
    })
}

fn full_grad_norm(net: &Network, tasks: &[(TaskId, &Batch)]) -> Result<f64> {
    let total: usize = tasks.iter().map(|(_, b)| b.len()).sum();
    let mut g = vec![0.0; net.param_count()];
    for &(task, batch) in tasks {
        let (_, gs, _) = net.backprop_sum(batch, task, false)?;
        for (acc, v) in g.iter_mut().zip(&gs) {
            *acc += v / total as f64;
        }
    }
    Ok(linalg::norm(&g))
}

/// Accuracy of the network's own head for `task` on `batch`.
pub fn head_accuracy(net: &Network, batch: &Batch, task: TaskId) -> Result<f64> {
    let logits = net.batch_logits(batch, task)?;
    let correct = batch
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &l)| crate::net::argmax(logits.column(*i).iter().copied()) == l)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Re-trains the unpruned encoder weights on one task with the heads frozen.
/// Pruned coordinates never move, so they stay exactly zero.
pub fn retrain(
    net: &Network,
    mask: &PruneMask,
    batch: &Batch,
    task: TaskId,
    schedule: &SgdSchedule,
    seed: u64,
) -> Result<RetrainReport> {
    schedule.validate()?;
    if mask.len() != net.param_count() {
        return Err(Error::dim("mask length", net.param_count(), mask.len()));
    }
    net.head(task)?;
    let mut net = net.clone();
    let keep = mask.bits();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut mom = Momentum::new(net.param_count());
    let mut curve = LossCurve::default();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let sub = batch.select(chunk);
            let (loss, g) = net.loss_and_grad(&sub, task)?;
            loss_sum += loss * chunk.len() as f64;
            mom.step(net.weights_mut(), &g, Some(keep), schedule, lr);
        }
        let epoch_loss = loss_sum / batch.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        curve.points.push((epoch, epoch_loss, lr));
    }
    Ok(RetrainReport { net, curve })
}

/// Writes a text checkpoint: header lines, then one decimal per line.
pub fn write_checkpoint<W: Write>(mut w: W, net: &Network, seed: u64, schedule: &SgdSchedule) -> std::io::Result<()> {
    writeln!(w, "# prunelab checkpoint v1")?;
    let layers: Vec<String> = net
        .layers()
        .iter()
        .map(|l| format!("{}:{}:{}", l.in_dim, l.out_dim, if l.has_activation { "relu" } else { "none" }))
        .collect();
    writeln!(w, "layers {}", layers.join(" "))?;
    writeln!(w, "seed {seed}")?;
    writeln!(w, "schedule {}", schedule.describe())?;
    writeln!(w, "weights {}", net.param_count())?;
    for v in net.weights() {
        writeln!(w, "{v}")?;
    }
    for (task, head) in net.heads() {
        writeln!(w, "head {task} {} {}", head.features, head.classes)?;
        for v in &head.values {
            writeln!(w, "{v}")?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the network
/// and its recorded seed.
pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(Network, u64)> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        loop {
            match lines.next() {
                Some((_, Ok(l))) if l.starts_with('#') || l.trim().is_empty() => continue,
                Some((i, Ok(l))) => return Ok((i + 1, l)),
                Some((i, Err(e))) => return Err(Error::parse(format!("line {}", i + 1), e.to_string())),
                None => return Err(Error::parse("checkpoint", format!("unexpected end, wanted {what}"))),
            }
        }
    };
    let num = |line: usize, s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::parse(format!("line {line}"), e.to_string()))
    };
    let (ln, layers_line) = next("layers")?;
    let specs = layers_line
        .strip_prefix("layers ")
        .ok_or_else(|| Error::parse(format!("line {ln}"), "expected 'layers'"))?
        .split_whitespace()
        .map(|tok| {
            let parts: Vec<&str> = tok.split(':').collect();
            let bad = || Error::parse(format!("line {ln}"), format!("bad layer '{tok}'"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let m = parts[0].parse().map_err(|_| bad())?;
            let h = parts[1].parse().map_err(|_| bad())?;
            Ok(LayerSpec::new(m, h, parts[2] == "relu"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = Network::new(specs)?;
    let (ln, seed_line) = next("seed")?;
    let seed = seed_line
        .strip_prefix("seed ")
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| Error::parse(format!("line {ln}"), "expected 'seed N'"))?;
    let (_, _schedule) = next("schedule")?;
    let (ln, wline) = next("weights")?;
    let count: usize = wline
        .strip_prefix("weights ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::parse(format!("line {ln}"), "expected 'weights N'"))?;
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, l) = next("weight")?;
        weights.push(num(ln, &l)?);
    }
    net.set_weights(weights)?;
    while let Ok((ln, l)) = next("head") {
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "head" {
            return Err(Error::parse(format!("line {ln}"), "expected 'head T H C'"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(format!("line {ln}"), e.to_string()));
        let (task, h, c) = (parse(parts[1])?, parse(parts[2])?, parse(parts[3])?);
        let mut values = Vec::with_capacity(h * c);
        for _ in 0..h * c {
            let (ln, l) = next("head value")?;
            values.push(num(ln, &l)?);
        }
        net.set_head(task, Head::new(h, c, values)?)?;
    }
    Ok((net, seed))
}
