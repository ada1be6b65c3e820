//! Per-parameter pruning scores and the OBS compensating update.
//!
//! Second-order scores estimate the loss increase caused by zeroing one
//! weight, `θ_j² / [H⁻¹]_jj`, under a chosen curvature: identity
//! (magnitude), diagonal, per-layer Kronecker blocks, or the exact matrix.
//! SNIP and GraSP are the first-order and gradient-flow baselines.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hessian::{self, Curvature, CurvatureEstimate, Damping, KronFactor, KronInverse};
use crate::linalg::{self, Matrix};
use crate::net::{Batch, Network, TaskId};
use crate::par::ExecMode;

/// Condition number above which exact OBS refuses to invert.
pub const MAX_CONDITION: f64 = 1e12;
/// Default relative damping for exact OBS, `λ = 1e-6 · trace(H) / p`.
pub const EXACT_RELATIVE_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Magnitude,
    DiagHessian,
    BlockHessian,
    ExactObs,
    Snip,
    Grasp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Magnitude,
        Method::DiagHessian,
        Method::BlockHessian,
        Method::ExactObs,
        Method::Snip,
        Method::Grasp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::DiagHessian => "diag",
            Method::BlockHessian => "block",
            Method::ExactObs => "exact_obs",
            Method::Snip => "snip",
            Method::Grasp => "grasp",
        }
    }

    /// Whether masking keeps the highest scores. GraSP removes the weights
    /// with the largest `−θ⊙Hg`, so it keeps the lowest.
    pub fn keep_highest(self) -> bool {
        self != Method::Grasp
    }

    /// Whether the method reads task data at all.
    pub fn uses_data(self) -> bool {
        self != Method::Magnitude
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub method: Method,
    pub values: Vec<f64>,
    pub source_task: Option<TaskId>,
    pub seed: u64,
}

impl ScoreVector {
    pub fn new(method: Method, values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{method} score at index {j}")));
        }
        Ok(Self {
            method,
            values,
            source_task: None,
            seed: 0,
        })
    }

    pub fn with_provenance(mut self, task: TaskId, seed: u64) -> Self {
        self.source_task = Some(task);
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn keep_highest(&self) -> bool {
        self.method.keep_highest()
    }

    /// CSV with columns `param_index,layer,row,col,method,score`.
    pub fn write_csv<W: Write>(&self, net: &Network, mut w: W) -> Result<()> {
        if self.len() != net.param_count() {
            return Err(Error::dim("score vector", net.param_count(), self.len()));
        }
        let io = |e| Error::io("<scores>", e);
        writeln!(w, "param_index,layer,row,col,method,score").map_err(io)?;
        for (j, v) in self.values.iter().enumerate() {
            let (l, r, c) = net.locate(j).expect("index in range");
            writeln!(w, "{j},{l},{r},{c},{},{v:e}", self.method).map_err(io)?;
        }
        Ok(())
    }
}

/// `θ_j²`.
pub fn score_magnitude(weights: &[f64]) -> Result<ScoreVector> {
    ScoreVector::new(Method::Magnitude, weights.iter().map(|w| w * w).collect())
}

/// `θ_j² · H_jj`.
pub fn score_diag(weights: &[f64], diag: &[f64]) -> Result<ScoreVector> {
    if diag.len() != weights.len() {
        return Err(Error::dim("diagonal curvature", weights.len(), diag.len()));
    }
    let values = weights.iter().zip(diag).map(|(w, h)| w * w * h).collect();
    ScoreVector::new(Method::DiagHessian, values)
}

/// `θ_j² / [A⁻¹ ⊗ B⁻¹]_jj` per layer, with each factor damped.
pub fn score_block(weights: &[f64], blocks: &[KronFactor], damping: Damping) -> Result<ScoreVector> {
    let inv = KronInverse::new(blocks, damping)?;
    score_block_with(weights, &inv)
}

pub fn score_block_with(weights: &[f64], inv: &KronInverse) -> Result<ScoreVector> {
    if inv.param_count() != weights.len() {
        return Err(Error::dim("Kronecker blocks", weights.len(), inv.param_count()));
    }
    let values = weights
        .iter()
        .zip(inv.diag())
        .map(|(w, d)| w * w / d)
        .collect();
    ScoreVector::new(Method::BlockHessian, values)
}

/// Dense inverse of `H + λI`, refusing ill-conditioned systems.
pub fn damped_inverse(h: &Matrix, damping: Damping) -> Result<Matrix> {
    if h.nrows() != h.ncols() {
        return Err(Error::dim("Hessian (square)", h.nrows(), h.ncols()));
    }
    let damped = linalg::damped(h, damping.resolve(h));
    let condition = linalg::spd_condition(&damped);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    linalg::spd_inverse(&damped, "damped Hessian")
}

/// `θ_j² / [(H + λI)⁻¹]_jj` from a dense inverse.
pub fn score_exact_obs(weights: &[f64], h: &Matrix, damping: Damping) -> Result<ScoreVector> {
    if h.nrows() != weights.len() {
        return Err(Error::dim("Hessian", weights.len(), h.nrows()));
    }
    let inv = damped_inverse(h, damping)?;
    let values = weights
        .iter()
        .enumerate()
        .map(|(j, w)| w * w / inv[(j, j)])
        .collect();
    ScoreVector::new(Method::ExactObs, values)
}

/// Curvature source for [`obs_update`].
#[derive(Debug, Clone, Copy)]
pub enum ObsCurvature<'a> {
    /// Already-inverted dense matrix.
    DenseInverse(&'a Matrix),
    Blocks(&'a KronInverse),
}

/// Compensating update `δ = −(θ_j / [H⁻¹]_jj) · H⁻¹[:, j]` for removing
/// weight `j`. With block curvature only the layer containing `j` moves.
pub fn obs_update(weights: &[f64], curvature: ObsCurvature<'_>, j: usize) -> Result<Vec<f64>> {
    let p = weights.len();
    if j >= p {
        return Err(Error::dim("pruned index", p, j));
    }
    let mut delta = vec![0.0; p];
    match curvature {
        ObsCurvature::DenseInverse(inv) => {
            if inv.nrows() != p {
                return Err(Error::dim("inverse Hessian", p, inv.nrows()));
            }
            let scale = weights[j] / inv[(j, j)];
            for (i, d) in delta.iter_mut().enumerate() {
                *d = -scale * inv[(i, j)];
            }
        }
        ObsCurvature::Blocks(inv) => {
            if inv.param_count() != p {
                return Err(Error::dim("Kronecker blocks", p, inv.param_count()));
            }
            let (range, col) = inv.column(j)?;
            let scale = weights[j] / col[j - range.start];
            for (d, c) in delta[range].iter_mut().zip(&col) {
                *d = -scale * c;
            }
        }
    }
    // exact zero rather than θ_j·(1 − 1) roundoff
    delta[j] = -weights[j];
    Ok(delta)
}

/// `|∂L/∂θ_j · θ_j|`, or the signed product when `absolute` is false.
pub fn score_snip(net: &Network, batch: &Batch, task: TaskId, absolute: bool) -> Result<ScoreVector> {
    let g = net.grad(batch, task)?;
    let values = g
        .iter()
        .zip(net.weights())
        .map(|(g, w)| {
            let s = g * w;
            if absolute {
                s.abs()
            } else {
                s
            }
        })
        .collect();
    ScoreVector::new(Method::Snip, values)
}

/// `−θ ⊙ (H g)` with `g` the batch gradient and `Hg` a finite-difference
/// Hessian-vector product.
pub fn score_grasp(net: &Network, batch: &Batch, task: TaskId) -> Result<ScoreVector> {
    let g = net.grad(batch, task)?;
    let hg = hessian::hvp(net, batch, task, &g)?;
    let values = net.weights().iter().zip(&hg).map(|(w, v)| -w * v).collect();
    ScoreVector::new(Method::Grasp, values)
}

/// Knobs for [`score_network`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub snip_absolute: bool,
    pub block_damping: Damping,
    pub exact_damping: Damping,
    pub exact_cap: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            snip_absolute: true,
            block_damping: Damping::Relative(hessian::KFAC_RELATIVE_DAMPING),
            exact_damping: Damping::Relative(EXACT_RELATIVE_DAMPING),
            exact_cap: hessian::EXACT_HESSIAN_CAP,
        }
    }
}

/// Scores the encoder weights of `net` with `method` on the task's batch.
pub fn score_network(
    method: Method,
    net: &Network,
    batch: &Batch,
    task: TaskId,
    opts: &ScoreOptions,
) -> Result<ScoreVector> {
    let w = net.weights();
    match method {
        Method::Magnitude => score_magnitude(w),
        Method::DiagHessian => score_diag(w, &hessian::fisher_diag(net, batch, task)?),
        Method::BlockHessian => {
            score_block(w, &hessian::kfac_factors(net, batch, task)?, opts.block_damping)
        }
        Method::ExactObs => {
            let h = hessian::exact_hessian(net, batch, task, opts.exact_cap, ExecMode::Sequential)?;
            score_exact_obs(w, &h.matrix, opts.exact_damping)
        }
        Method::Snip => score_snip(net, batch, task, opts.snip_absolute),
        Method::Grasp => score_grasp(net, batch, task),
    }
}

/// Scores from an already computed curvature estimate.
pub fn score_with_curvature(weights: &[f64], est: &CurvatureEstimate) -> Result<ScoreVector> {
    match &est.curvature {
        Curvature::Isotropic => score_magnitude(weights),
        Curvature::Diagonal(d) => score_diag(weights, d),
        Curvature::KroneckerBlocks(b) => score_block(weights, b, est.damping),
        Curvature::Exact(h) => score_exact_obs(weights, h, est.damping),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Head;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn magnitude_squares() {
        assert_eq!(score_magnitude(&[3.0, -2.0, 0.0]).unwrap().values, vec![9.0, 4.0, 0.0]);
    }

    #[test]
    fn diag_reductions() {
        let w = [0.5, -1.5, 2.0];
        assert_eq!(score_diag(&w, &[1.0; 3]).unwrap().values, score_magnitude(&w).unwrap().values);
        assert_eq!(score_diag(&w, &[0.0, 2.0, 1.0]).unwrap().values[0], 0.0);
        assert!(score_diag(&w, &[1.0; 2]).is_err());
    }

    #[test]
    fn exact_with_identity_is_magnitude() {
        let w = [0.3, -0.7, 1.1, 0.0];
        let s = score_exact_obs(&w, &Matrix::identity(4, 4), Damping::Absolute(0.0)).unwrap();
        assert_eq!(s.values, score_magnitude(&w).unwrap().values);
    }

    #[test]
    fn exact_with_diagonal_matches_diag_score() {
        let w = [0.3, -0.7, 1.1];
        let d = [2.0, 0.5, 3.0];
        let h = Matrix::from_diagonal(&nalgebra::DVector::from_row_slice(&d));
        let a = score_exact_obs(&w, &h, Damping::Absolute(0.0)).unwrap();
        let b = score_diag(&w, &d).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn ill_conditioned_exact_is_refused() {
        let h = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let err = score_exact_obs(&[1.0, 1.0], &h, Damping::Absolute(0.0)).unwrap_err();
        assert!(matches!(err, Error::IllConditioned { .. }));
        assert!(score_exact_obs(&[1.0, 1.0], &h, Damping::Absolute(1e-6)).is_ok());
    }

    #[test]
    fn obs_update_diagonal_touches_only_j() {
        let w = [0.4, -0.9, 1.3];
        let h = Matrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[2.0, 3.0, 5.0]));
        let inv = damped_inverse(&h, Damping::Absolute(0.0)).unwrap();
        let d = obs_update(&w, ObsCurvature::DenseInverse(&inv), 1).unwrap();
        assert_eq!(d, vec![0.0, 0.9, 0.0]);
    }

    #[test]
    fn obs_update_zeroes_target_for_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 2..8 {
            let x = Matrix::from_fn(n, n + 1, |_, _| rng.random_range(-1.0..1.0));
            let h = &x * x.transpose() + Matrix::identity(n, n) * 0.05;
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let inv = damped_inverse(&h, Damping::Absolute(0.0)).unwrap();
            for j in 0..n {
                let d = obs_update(&w, ObsCurvature::DenseInverse(&inv), j).unwrap();
                assert_eq!(w[j] + d[j], 0.0);
            }
        }
    }

    #[test]
    fn grasp_keeps_lowest() {
        assert!(!Method::Grasp.keep_highest());
        assert!(Method::ALL.iter().filter(|m| **m != Method::Grasp).all(|m| m.keep_highest()));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn scores_csv_has_locations() {
        let mut net = Network::mlp(&[2, 2, 1]).unwrap();
        net.set_weights(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        net.set_head(0, Head::zeros(1, 2)).unwrap();
        let s = score_magnitude(net.weights()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&net, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "param_index,layer,row,col,method,score");
        assert_eq!(lines[5], "4,1,0,0,magnitude,2.5e1");
        assert_eq!(lines.len(), 7);
    }
}
