//! Self-checks that compare the fast paths against slow reference
//! computations on random problems.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hessian::{self, Damping};
use crate::linalg::{self, Matrix};
use crate::net::{Batch, Head, Network};
use crate::par::ExecMode;
use crate::probe;
use crate::saliency::{self, ObsCurvature};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Gradient,
    Hessian,
    Obs,
    Kfac,
    Ridge,
}

impl Check {
    pub const ALL: [Check; 5] = [Check::Gradient, Check::Hessian, Check::Obs, Check::Kfac, Check::Ridge];

    pub fn name(self) -> &'static str {
        match self {
            Check::Gradient => "gradient",
            Check::Hessian => "hessian",
            Check::Obs => "obs",
            Check::Kfac => "kfac",
            Check::Ridge => "ridge",
        }
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown check '{s}' (expected gradient, hessian, obs, kfac or ridge)")))
    }
}

/// One compared quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleItem {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
}

impl OracleItem {
    fn new(name: impl Into<String>, deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            deviation,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.deviation <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub check: Check,
    pub items: Vec<OracleItem>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(OracleItem::passed)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for it in &self.items {
            writeln!(
                f,
                "{} {:<48} max deviation {:.3e} (tolerance {:.1e})",
                if it.passed() { "PASS" } else { "FAIL" },
                it.name,
                it.deviation,
                it.tolerance
            )?;
        }
        write!(f, "{}: {}", self.check.name(), if self.passed() { "pass" } else { "fail" })
    }
}

pub fn run_check(check: Check, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = match check {
        Check::Gradient => gradient(&mut rng)?,
        Check::Hessian => hessian_check(&mut rng)?,
        Check::Obs => obs(&mut rng)?,
        Check::Kfac => kfac(&mut rng)?,
        Check::Ridge => ridge(&mut rng)?,
    };
    Ok(OracleReport { check, items })
}

/// Small network with a random head for task 0 and a random batch.
pub fn random_problem<R: Rng>(rng: &mut R, dims: &[usize], classes: usize, n: usize) -> Result<(Network, Batch)> {
    let mut net = Network::mlp(dims)?;
    net.init_he(rng);
    let h = net.feature_dim();
    let head: Vec<f64> = (0..h * classes).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
    net.set_head(0, Head::new(h, classes, head)?)?;
    let d = net.input_dim();
    let inputs = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Ok((net, Batch::new(inputs, labels, d, classes)?))
}

pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &m * m.transpose() + Matrix::identity(n, n) * (0.5 * n as f64)
}

fn gradient(rng: &mut ChaCha8Rng) -> Result<Vec<OracleItem>> {
    let mut items = Vec::new();
    for dims in [vec![3, 4, 2], vec![5, 3], vec![4, 6, 5, 3], vec![2, 8, 8, 4]] {
        let (net, batch) = random_problem(rng, &dims, 3, 7)?;
        let g = net.grad(&batch, 0)?;
        let step = 1e-5;
        let mut dev: f64 = 0.0;
        for j in 0..net.param_count() {
            let mut w = net.weights().to_vec();
            w[j] += step;
            let lp = net.with_weights(w.clone())?.loss(&batch, 0)?;
            w[j] -= 2.0 * step;
            let lm = net.with_weights(w)?.loss(&batch, 0)?;
            dev = dev.max(((lp - lm) / (2.0 * step) - g[j]).abs());
        }
        items.push(OracleItem::new(format!("gradient vs central differences {dims:?}"), dev, 1e-6));
    }
    Ok(items)
}

fn hessian_check(rng: &mut ChaCha8Rng) -> Result<Vec<OracleItem>> {
    let mut items = Vec::new();
    for dims in [vec![3, 4, 2], vec![4, 5, 3]] {
        let (net, batch) = random_problem(rng, &dims, 3, 9)?;
        let h = hessian::exact_hessian(&net, &batch, 0, hessian::EXACT_HESSIAN_CAP, ExecMode::Sequential)?;
        items.push(OracleItem::new(format!("hessian asymmetry {dims:?}"), h.raw_asymmetry, 1e-5));
        let v: Vec<f64> = (0..net.param_count()).map(|_| rng.sample(StandardNormal)).collect();
        let hv = hessian::hvp(&net, &batch, 0, &v)?;
        let exact = &h.matrix * linalg::Vector::from_column_slice(&v);
        let diff: Vec<f64> = hv.iter().zip(exact.iter()).map(|(a, b)| a - b).collect();
        let rel = linalg::norm(&diff) / exact.norm().max(f64::MIN_POSITIVE);
        items.push(OracleItem::new(format!("hvp vs dense product {dims:?}"), rel, 1e-3));
    }
    Ok(items)
}

/// Minimum of `δᵀHδ` subject to `δ_j = −θ_j`, by solving the reduced
/// system over the free coordinates.
pub fn constrained_minimum(h: &Matrix, theta: &[f64], j: usize) -> Result<(f64, Vec<f64>)> {
    let p = theta.len();
    let free: Vec<usize> = (0..p).filter(|&i| i != j).collect();
    let mut delta = vec![0.0; p];
    delta[j] = -theta[j];
    if !free.is_empty() {
        let hff = Matrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let rhs = Matrix::from_fn(free.len(), 1, |a, _| -h[(free[a], j)] * delta[j]);
        let sol = linalg::ldl_solve(&hff, &rhs, "constrained minimum")?;
        for (a, &i) in free.iter().enumerate() {
            delta[i] = sol[(a, 0)];
        }
    }
    let d = linalg::Vector::from_column_slice(&delta);
    Ok((d.dot(&(h * &d)), delta))
}

fn obs(rng: &mut ChaCha8Rng) -> Result<Vec<OracleItem>> {
    let mut score_dev: f64 = 0.0;
    let mut update_dev: f64 = 0.0;
    for trial in 0..100 {
        let p = if trial == 0 { 2 } else { rng.random_range(2..=10) };
        let h = random_spd(rng, p);
        let theta: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let scores = saliency::score_exact_obs(&theta, &h, Damping::Absolute(0.0))?;
        let inv = saliency::damped_inverse(&h, Damping::Absolute(0.0))?;
        for j in 0..p {
            let (best, _) = constrained_minimum(&h, &theta, j)?;
            score_dev = score_dev.max((scores.values[j] - best).abs() / best.abs().max(1e-300));
            let delta = saliency::obs_update(&theta, ObsCurvature::DenseInverse(&inv), j)?;
            let d = linalg::Vector::from_column_slice(&delta);
            let reached = d.dot(&(&h * &d));
            update_dev = update_dev.max((reached - best).abs() / best.abs().max(1e-300));
        }
    }
    Ok(vec![
        OracleItem::new("score vs constrained loss increase (relative)", score_dev, 1e-8),
        OracleItem::new("update reaches constrained minimum (relative)", update_dev, 1e-8),
    ])
}

fn kfac(rng: &mut ChaCha8Rng) -> Result<Vec<OracleItem>> {
    let mut kron_dev: f64 = 0.0;
    for m in 1..=8 {
        for h in 1..=8 {
            let a = random_spd(rng, m);
            let b = random_spd(rng, h);
            let ai = linalg::spd_inverse(&a, "A")?;
            let bi = linalg::spd_inverse(&b, "B")?;
            let prod = linalg::kron(&a, &b) * linalg::kron(&ai, &bi);
            let n = m * h;
            kron_dev = kron_dev.max((prod - Matrix::identity(n, n)).abs().max());
        }
    }
    let mut block_dev: f64 = 0.0;
    let mut storage_gap = i64::MAX;
    for dims in [vec![3, 4, 2], vec![5, 3, 6]] {
        let (net, batch) = random_problem(rng, &dims, 3, 1)?;
        let factors = hessian::kfac_factors(&net, &batch, 0)?;
        let g = net.per_example_grads(&batch, 0)?;
        for (l, f) in factors.iter().enumerate() {
            let r = net.layer_range(l);
            let gl = g.row(0).columns(r.start, r.len()).transpose();
            let dense = &gl * gl.transpose();
            block_dev = block_dev.max((linalg::kron(&f.a, &f.b) - dense).abs().max());
            let (m, h) = (f.a.nrows(), f.b.nrows());
            if m > 1 && h > 1 {
                let dense_floats = (m * h * m * h) as i64;
                storage_gap = storage_gap.min(dense_floats - (m * m + h * h) as i64);
            }
        }
    }
    Ok(vec![
        OracleItem::new("(A⊗B)(A⁻¹⊗B⁻¹) − I", kron_dev, 1e-8),
        OracleItem::new("single-sample block vs empirical Fisher", block_dev, 1e-10),
        OracleItem::new("factored storage not below dense", if storage_gap > 0 { 0.0 } else { 1.0 }, 0.0),
    ])
}

/// Minimises the ridge objective by gradient descent with step `1/(2L)`.
pub fn ridge_by_descent(phi: &Matrix, y: &Matrix, alpha: f64, iters: usize) -> Matrix {
    let gram = linalg::damped(&phi.tr_mul(phi), alpha);
    let rhs = phi.tr_mul(y);
    let lipschitz = linalg::sym_eigenvalues(&gram).last().copied().unwrap_or(1.0);
    let step = 1.0 / (2.0 * lipschitz);
    let mut xi = Matrix::zeros(phi.ncols(), y.ncols());
    for _ in 0..iters {
        let grad = (&gram * &xi - &rhs) * 2.0;
        xi -= grad * step;
    }
    xi
}

fn ridge(rng: &mut ChaCha8Rng) -> Result<Vec<OracleItem>> {
    let (n, h, c) = (40, 6, 3);
    let phi = Matrix::from_fn(n, h, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = Matrix::from_fn(n, c, |i, k| (i % c == k) as u8 as f64);
    let mut normal: f64 = 0.0;
    let mut descent: f64 = 0.0;
    for alpha in [0.1, 1.0, 10.0] {
        let xi = probe::fit_ridge(&phi, &y, alpha)?;
        normal = normal.max(probe::normal_equation_residual(&phi, &y, alpha, &xi));
        let gd = ridge_by_descent(&phi, &y, alpha, 20_000);
        descent = descent.max((gd - &xi).abs().max());
    }
    let eye = probe::fit_ridge(&Matrix::identity(4, 4), &Matrix::identity(4, 4), 1.0)?;
    let exact = (eye - Matrix::identity(4, 4) * 0.5).abs().max();
    Ok(vec![
        OracleItem::new("normal-equation residual", normal, 1e-8),
        OracleItem::new("closed form vs gradient descent", descent, 1e-6),
        OracleItem::new("identity features give Y/2", exact, 0.0),
    ])
}
