//! Synthetic multi-task classification suites.
//!
//! Each task draws its class prototypes from a `C`-dimensional subspace of
//! the input space. The subspace of task `t` mixes a shared subspace `S`
//! with a private one `P_t`: `B_t = ρ·S + √(1−ρ²)·P_t`. At `ρ = 1` every
//! task lives in the same subspace (aligned geometry); at `ρ = 0` the task
//! subspaces are mutually orthogonal. Within its subspace each task gets its
//! own random orthonormal frame of prototypes, so no two tasks share a
//! prototype. Examples are prototypes plus isotropic Gaussian noise.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{Batch, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub seed: u64,
    pub n_tasks: usize,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Examples per class in the held-out split.
    pub eval_per_class: usize,
    pub rho: f64,
    /// Prototype norm.
    pub scale: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tasks: 10,
            classes: 10,
            dim: 64,
            per_class: 50,
            eval_per_class: 50,
            rho: 1.0,
            scale: 3.0,
            noise: 0.35,
        }
    }
}

impl TaskParams {
    /// Orthonormal input directions the construction needs.
    pub fn required_dim(&self) -> usize {
        let c = self.classes;
        if self.rho >= 1.0 {
            c
        } else if self.rho <= 0.0 {
            self.n_tasks * c
        } else {
            (self.n_tasks + 1) * c
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub train: Batch,
    pub eval: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub params: TaskParams,
    pub tasks: Vec<Task>,
    /// Orthonormal `d × C` prototype basis of each task.
    pub bases: Vec<Matrix>,
}

/// Source/transfer split of a task set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub source: TaskId,
    pub transfer: Vec<TaskId>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: TaskId) -> Result<&Task> {
        self.tasks.get(id).ok_or(Error::UnknownTask(id))
    }

    /// Mean principal angle (radians) over all task pairs.
    pub fn mean_principal_angle(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for a in 0..self.bases.len() {
            for b in (a + 1)..self.bases.len() {
                let cross = self.bases[a].transpose() * &self.bases[b];
                let sv = cross.singular_values();
                for s in sv.iter() {
                    total += s.clamp(-1.0, 1.0).acos();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Writes `task_<id>_{train,eval}.csv` plus `manifest.toml` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = toml::to_string(&self.params)
            .map_err(|e| Error::parse("manifest", e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        for task in &self.tasks {
            for (split, batch) in [("train", &task.train), ("eval", &task.eval)] {
                let path = dir.join(format!("task_{}_{split}.csv", task.id));
                write_batch_csv(&path, batch)?;
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`TaskSet::dump`]. Bases are regenerated from
    /// the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let params: TaskParams =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let bases = generate(&params)?.bases;
        let mut tasks = Vec::with_capacity(params.n_tasks);
        for id in 0..params.n_tasks {
            let train = read_batch_csv(&dir.join(format!("task_{id}_train.csv")), params.dim, params.classes)?;
            let eval = read_batch_csv(&dir.join(format!("task_{id}_eval.csv")), params.dim, params.classes)?;
            tasks.push(Task { id, train, eval });
        }
        Ok(Self {
            params,
            tasks,
            bases,
        })
    }
}

fn write_batch_csv(path: &Path, batch: &Batch) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..batch.dim()).map(|k| format!("x_{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, label) in batch.labels().iter().enumerate() {
        write!(w, "{label}").map_err(io)?;
        for v in batch.row(i) {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_batch_csv(path: &Path, dim: usize, classes: usize) -> Result<Batch> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let loc = || format!("{}:{}", path.display(), lineno + 1);
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(loc(), "bad label"))?;
        let row: Vec<f64> = fields
            .map(|s| s.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string())))
            .collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(Error::parse(loc(), format!("expected {dim} features, got {}", row.len())));
        }
        labels.push(label);
        inputs.extend(row);
    }
    Batch::new(inputs, labels, dim, classes)
}

fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Builds a task set; fully determined by `params`.
pub fn generate(params: &TaskParams) -> Result<TaskSet> {
    let p = params;
    if p.n_tasks == 0 || p.classes < 2 || p.per_class == 0 || p.eval_per_class == 0 {
        return Err(Error::InvalidArgument(
            "need ≥1 task, ≥2 classes and ≥1 example per class in each split".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.rho) {
        return Err(Error::InvalidArgument(format!("rho {} outside [0, 1]", p.rho)));
    }
    let need = p.required_dim();
    if p.dim < need {
        return Err(Error::InvalidArgument(format!(
            "input dim {} cannot hold {} task subspaces at rho={}; need dim ≥ {need}",
            p.dim, p.n_tasks, p.rho
        )));
    }
    let c = p.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let frame = orthonormal(p.dim, need, &mut rng);
    let shared = frame.columns(0, c).into_owned();
    let private_offset = if p.rho > 0.0 && p.rho < 1.0 { c } else { 0 };
    let mix = (1.0 - p.rho * p.rho).max(0.0).sqrt();

    let mut tasks = Vec::with_capacity(p.n_tasks);
    let mut bases = Vec::with_capacity(p.n_tasks);
    for t in 0..p.n_tasks {
        let basis = if p.rho >= 1.0 {
            shared.clone()
        } else {
            let private = frame.columns(private_offset + t * c, c).into_owned();
            if p.rho <= 0.0 {
                private
            } else {
                &shared * p.rho + private * mix
            }
        };
        let rotation = orthonormal(c, c, &mut rng);
        let prototypes = (&basis * rotation) * p.scale; // d × C
        let mut make_split = |per_class: usize| -> Result<Batch> {
            let n = per_class * c;
            let mut inputs = Vec::with_capacity(n * p.dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % c;
                let proto = prototypes.column(label);
                for k in 0..p.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    inputs.push(proto[k] + p.noise * z);
                }
                labels.push(label);
            }
            Batch::new(inputs, labels, p.dim, c)
        };
        let train = make_split(p.per_class)?;
        let eval = make_split(p.eval_per_class)?;
        tasks.push(Task { id: t, train, eval });
        bases.push(basis);
    }
    Ok(TaskSet {
        params: p.clone(),
        tasks,
        bases,
    })
}

/// Elects task `source` and holds out every other task.
pub fn rotate_roles(set: &TaskSet, source: usize) -> Result<Roles> {
    if source >= set.len() {
        return Err(Error::InvalidArgument(format!(
            "source index {source} out of range for {} tasks",
            set.len()
        )));
    }
    Ok(Roles {
        source,
        transfer: (0..set.len()).filter(|&t| t != source).collect(),
    })
}
