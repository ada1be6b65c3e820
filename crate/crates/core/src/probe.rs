//! Ridge-regression linear probes and evaluation records.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::net::{argmax, Batch, Head, Network, TaskId};
use crate::saliency::Method;

/// Ridge coefficient used unless overridden.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Closed-form ridge solution `ξ* = (ΦᵀΦ + αI)⁻¹ ΦᵀY` via an `LDLᵀ` solve.
///
/// `features` is `n × h`, `targets` is `n × C`; returns `h × C`.
pub fn fit_ridge(features: &Matrix, targets: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("ridge alpha must be positive, got {alpha}")));
    }
    if features.nrows() != targets.nrows() {
        return Err(Error::dim("ridge targets", features.nrows(), targets.nrows()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    let gram = linalg::damped(&features.tr_mul(features), alpha);
    let rhs = features.tr_mul(targets);
    linalg::ldl_solve(&gram, &rhs, "ridge normal equations")
}

/// `‖(ΦᵀΦ + αI)ξ − ΦᵀY‖∞`.
pub fn normal_equation_residual(features: &Matrix, targets: &Matrix, alpha: f64, xi: &Matrix) -> f64 {
    let lhs = linalg::damped(&features.tr_mul(features), alpha) * xi;
    let rhs = features.tr_mul(targets);
    (lhs - rhs).abs().max()
}

/// Ridge objective `‖Y − Φξ‖² + α‖ξ‖²`.
pub fn ridge_objective(features: &Matrix, targets: &Matrix, alpha: f64, xi: &Matrix) -> f64 {
    (targets - features * xi).norm_squared() + alpha * xi.norm_squared()
}

/// A frozen per-task linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    pub task: TaskId,
    pub alpha: f64,
    pub head: Head,
}

impl ProbeClassifier {
    /// Fits on the features `net` produces for `batch`.
    pub fn fit(net: &Network, batch: &Batch, task: TaskId, alpha: f64) -> Result<Self> {
        let phi = net.batch_features(batch)?.transpose();
        let y = batch.one_hot().transpose();
        let xi = fit_ridge(&phi, &y, alpha)?;
        // h × C row-major
        let values = xi.transpose().as_slice().to_vec();
        Ok(Self {
            task,
            alpha,
            head: Head::new(xi.nrows(), xi.ncols(), values)?,
        })
    }

    pub fn xi(&self) -> Matrix {
        Matrix::from_row_slice(self.head.features, self.head.classes, &self.head.values)
    }
}

/// Fraction of examples whose argmax logit (lowest index on ties) matches
/// the label.
pub fn evaluate(net: &Network, probe: &ProbeClassifier, batch: &Batch) -> Result<f64> {
    if probe.head.classes != batch.classes() {
        return Err(Error::dim("probe classes", probe.head.classes, batch.classes()));
    }
    let phi = net.batch_features(batch)?;
    // row-major h × C is column-major C × h
    let xi_t = Matrix::from_column_slice(probe.head.classes, probe.head.features, &probe.head.values);
    let logits = xi_t * phi;
    let correct = batch
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &label)| argmax(logits.column(*i).iter().copied()) == label)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Source,
    Transfer,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Transfer => "transfer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "transfer" => Ok(Role::Transfer),
            _ => Err(Error::InvalidArgument(format!("unknown role '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Unpruned,
    Pruned,
    PrunedFinetuned,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Unpruned => "unpruned",
            Stage::Pruned => "pruned",
            Stage::PrunedFinetuned => "pruned_finetuned",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unpruned" => Ok(Stage::Unpruned),
            "pruned" => Ok(Stage::Pruned),
            "pruned_finetuned" => Ok(Stage::PrunedFinetuned),
            _ => Err(Error::InvalidArgument(format!("unknown stage '{s}'"))),
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub method: Method,
    pub sparsity: f64,
    pub task: TaskId,
    pub role: Role,
    pub stage: Stage,
    pub accuracy: f64,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "method,sparsity,task_id,role,stage,accuracy,seed";

impl EvalRecord {
    /// CSV row with six-digit decimals.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{:.6},{}",
            self.method, self.sparsity, self.task, self.role, self.stage, self.accuracy, self.seed
        )
    }
}

pub fn write_results_csv<W: Write>(mut w: W, records: &[EvalRecord]) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
