//! Two-parameter quadratic toy landscapes and 2-D loss-surface projections.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::par::ExecMode;

/// `L(θ) = (θ − θ₀)ᵀ R diag(λ) Rᵀ (θ − θ₀)` in two dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticTask {
    pub minimum: [f64; 2],
    pub eigvals: [f64; 2],
    /// Rotation of the first principal direction, radians.
    pub angle: f64,
}

impl QuadraticTask {
    pub fn new(minimum: [f64; 2], eigvals: [f64; 2], angle: f64) -> Result<Self> {
        if !(eigvals[0] > 0.0 && eigvals[1] > 0.0) {
            return Err(Error::InvalidArgument(format!("eigenvalues must be positive: {eigvals:?}")));
        }
        Ok(Self {
            minimum,
            eigvals,
            angle,
        })
    }

    pub fn hessian(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        let [a, b] = self.eigvals;
        [
            [a * c * c + b * s * s, (a - b) * c * s],
            [(a - b) * c * s, a * s * s + b * c * c],
        ]
    }

    pub fn loss(&self, theta: [f64; 2]) -> f64 {
        let h = self.hessian();
        let d = [theta[0] - self.minimum[0], theta[1] - self.minimum[1]];
        d[0] * (h[0][0] * d[0] + h[0][1] * d[1]) + d[1] * (h[1][0] * d[0] + h[1][1] * d[1])
    }

    pub fn grad(&self, theta: [f64; 2]) -> [f64; 2] {
        let h = self.hessian();
        let d = [theta[0] - self.minimum[0], theta[1] - self.minimum[1]];
        [
            2.0 * (h[0][0] * d[0] + h[0][1] * d[1]),
            2.0 * (h[1][0] * d[0] + h[1][1] * d[1]),
        ]
    }

    /// Saliency of both coordinates at the minimum under `approx`.
    pub fn scores(&self, approx: ToyApprox) -> [f64; 2] {
        let t = self.minimum;
        let h = self.hessian();
        match approx {
            ToyApprox::Magnitude => [t[0] * t[0], t[1] * t[1]],
            ToyApprox::Diagonal => [t[0] * t[0] * h[0][0], t[1] * t[1] * h[1][1]],
            ToyApprox::Exact => {
                // [H⁻¹]_jj = H_kk / det(H)
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                [t[0] * t[0] * det / h[1][1], t[1] * t[1] * det / h[0][0]]
            }
        }
    }

    /// Coordinate removed under `approx`: the lower score, index 1 on ties.
    pub fn pruned_index(&self, approx: ToyApprox) -> usize {
        let s = self.scores(approx);
        if s[0] < s[1] {
            0
        } else {
            1
        }
    }

    /// Minimises the loss over the free coordinate with `fixed` held at zero.
    pub fn retrain_along(&self, fixed: usize, start: [f64; 2]) -> [f64; 2] {
        let free = 1 - fixed;
        let h = self.hessian();
        let mut out = start;
        out[fixed] = 0.0;
        out[free] = self.minimum[free] - h[free][fixed] * (out[fixed] - self.minimum[fixed]) / h[free][free];
        out
    }
}

/// Curvature model used to score the two toy coordinates. With a single
/// two-weight block, the Kronecker block is the exact matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyApprox {
    Magnitude,
    Diagonal,
    Exact,
}

impl FromStr for ToyApprox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" | "isotropic" | "mag" => Ok(ToyApprox::Magnitude),
            "diag" | "diagonal" => Ok(ToyApprox::Diagonal),
            "block" | "exact" | "exact_obs" => Ok(ToyApprox::Exact),
            _ => Err(Error::InvalidArgument(format!("unknown approximation '{s}' (expected magnitude, diag, block or exact)"))),
        }
    }
}

impl fmt::Display for ToyApprox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyApprox::Magnitude => "magnitude",
            ToyApprox::Diagonal => "diag",
            ToyApprox::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDemo {
    pub pruned_index: usize,
    pub scores: [f64; 2],
    pub theta0: [f64; 2],
    pub pruned: [f64; 2],
    pub retrained: [f64; 2],
    /// `[source, transfer]` loss at θ₀, the pruned point and the re-trained point.
    pub losses: [[f64; 2]; 3],
}

impl ToyDemo {
    /// Transfer-loss reduction from re-training, `L_t(θ̃₀) − L_t(θ̃*_s)`.
    pub fn transfer_improvement(&self) -> f64 {
        self.losses[1][1] - self.losses[2][1]
    }

    /// Transfer-loss increase caused by pruning, `L_t(θ̃₀) − L_t(θ₀)`.
    pub fn transfer_pruning_increase(&self) -> f64 {
        self.losses[1][1] - self.losses[0][1]
    }

    pub fn snapshots(&self) -> [[f64; 2]; 3] {
        [self.theta0, self.pruned, self.retrained]
    }
}

/// Prunes one of two weights using the source curvature, then re-trains on
/// the source by exact minimisation along the remaining coordinate.
pub fn toy_prune_demo(source: &QuadraticTask, transfer: &QuadraticTask, approx: ToyApprox) -> ToyDemo {
    let theta0 = source.minimum;
    let j = source.pruned_index(approx);
    let mut pruned = theta0;
    pruned[j] = 0.0;
    let retrained = source.retrain_along(j, pruned);
    let at = |t| [source.loss(t), transfer.loss(t)];
    ToyDemo {
        pruned_index: j,
        scores: source.scores(approx),
        theta0,
        pruned,
        retrained,
        losses: [at(theta0), at(pruned), at(retrained)],
    }
}

/// Canonical toy configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyCase {
    Aligned,
    Misaligned,
    Iso,
    Diag,
    Cross,
}

impl ToyCase {
    pub const ALL: [ToyCase; 5] = [ToyCase::Aligned, ToyCase::Misaligned, ToyCase::Iso, ToyCase::Diag, ToyCase::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ToyCase::Aligned => "aligned",
            ToyCase::Misaligned => "misaligned",
            ToyCase::Iso => "iso",
            ToyCase::Diag => "diag",
            ToyCase::Cross => "cross",
        }
    }

    /// `(source, transfer)` quadratics sharing the minimum `(1.0, 0.7)`.
    pub fn tasks(self) -> (QuadraticTask, QuadraticTask) {
        let m = [1.0, 0.7];
        let q = |e: [f64; 2], a: f64| QuadraticTask {
            minimum: m,
            eigvals: e,
            angle: a,
        };
        let tilt = std::f64::consts::FRAC_PI_6;
        match self {
            ToyCase::Aligned => (q([4.0, 1.0], tilt), q([2.0, 0.5], tilt)),
            ToyCase::Misaligned => (q([4.0, 4e-9], tilt), q([4.0, 4e-9], tilt + FRAC_PI_2)),
            ToyCase::Iso => (q([1.0, 1.0], 0.0), q([1.0, 1.0], 0.0)),
            ToyCase::Diag => (q([4.0, 1.0], 0.0), q([4.0, 1.0], 0.0)),
            ToyCase::Cross => (q([4.0, 1.0], std::f64::consts::FRAC_PI_4), q([4.0, 1.0], std::f64::consts::FRAC_PI_4)),
        }
    }
}

impl FromStr for ToyCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown case '{s}' (expected aligned, misaligned, iso, diag or cross)")))
    }
}

/// Affine 2-D slice `origin + u·dirs[0] + w·dirs[1]` of weight space.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub origin: Vec<f64>,
    pub dirs: [Vec<f64>; 2],
}

impl Plane {
    pub fn reconstruct(&self, u: f64, w: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.dirs[0])
            .zip(&self.dirs[1])
            .map(|((o, a), b)| o + u * a + w * b)
            .collect()
    }

    pub fn project(&self, x: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = x.iter().zip(&self.origin).map(|(a, b)| a - b).collect();
        (linalg::dot(&d, &self.dirs[0]), linalg::dot(&d, &self.dirs[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub u: f64,
    pub w: f64,
    pub loss_source: f64,
    pub loss_transfer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub plane: Plane,
    /// Covariance eigenvalues of the two retained directions.
    pub explained: [f64; 2],
    pub points: Vec<GridPoint>,
    pub resolution: usize,
    pub grid: Vec<GridPoint>,
}

impl Projection {
    /// Grid index nearest to `(u, w)`.
    pub fn nearest(&self, u: f64, w: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, g) in self.grid.iter().enumerate() {
            let d = (g.u - u).powi(2) + (g.w - w).powi(2);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Grid rows `u,w,loss_source,loss_transfer`, then a `# snapshots` block
    /// with one row per projected snapshot.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[&str]) -> std::io::Result<()> {
        writeln!(w, "u,w,loss_source,loss_transfer")?;
        for g in &self.grid {
            writeln!(w, "{:.9e},{:.9e},{:.9e},{:.9e}", g.u, g.w, g.loss_source, g.loss_transfer)?;
        }
        writeln!(w, "# snapshots")?;
        writeln!(w, "point,u,w,loss_source,loss_transfer")?;
        for (i, p) in self.points.iter().enumerate() {
            let label = labels.get(i).copied().unwrap_or("snapshot");
            writeln!(w, "{label},{:.9e},{:.9e},{:.9e},{:.9e}", p.u, p.w, p.loss_source, p.loss_transfer)?;
        }
        Ok(())
    }
}

/// Loss grid over `plane`, covering the projected `snapshots` with a 20%
/// margin on each side.
pub fn grid_on_plane<F>(plane: Plane, explained: [f64; 2], snapshots: &[Vec<f64>], resolution: usize, mode: ExecMode, eval: F) -> Result<Projection>
where
    F: Fn(&[f64]) -> (f64, f64) + Sync + Send,
{
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let coords: Vec<(f64, f64)> = snapshots.iter().map(|s| plane.project(s)).collect();
    let points = snapshots
        .iter()
        .zip(&coords)
        .map(|(s, &(u, w))| {
            let (ls, lt) = eval(s);
            GridPoint {
                u,
                w,
                loss_source: ls,
                loss_transfer: lt,
            }
        })
        .collect();
    let bounds = |sel: fn(&(f64, f64)) -> f64| {
        let lo = coords.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (u_lo, u_hi) = bounds(|c| c.0);
    let (w_lo, w_hi) = bounds(|c| c.1);
    let fallback = (u_hi - u_lo).max(w_hi - w_lo).max(1e-12);
    let expand = |lo: f64, hi: f64| {
        let span = if hi > lo { hi - lo } else { fallback };
        (lo - 0.2 * span, hi + 0.2 * span)
    };
    let (u_lo, u_hi) = expand(u_lo, u_hi);
    let (w_lo, w_hi) = expand(w_lo, w_hi);
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let grid = mode.map_range(resolution * resolution, |idx| {
        let (iu, iw) = (idx / resolution, idx % resolution);
        let (u, w) = (step(u_lo, u_hi, iu), step(w_lo, w_hi, iw));
        let (ls, lt) = eval(&plane.reconstruct(u, w));
        GridPoint {
            u,
            w,
            loss_source: ls,
            loss_transfer: lt,
        }
    });
    Ok(Projection {
        plane,
        explained,
        points,
        resolution,
        grid,
    })
}

/// Principal plane of the mean-centred snapshots. The covariance
/// eigenproblem is solved through the small Gram matrix of the snapshots.
pub fn principal_plane(snapshots: &[Vec<f64>]) -> Result<(Plane, [f64; 2])> {
    let k = snapshots.len();
    if k < 2 {
        return Err(Error::InvalidArgument("need at least two snapshots".into()));
    }
    let p = snapshots[0].len();
    if let Some(s) = snapshots.iter().find(|s| s.len() != p) {
        return Err(Error::dim("snapshot length", p, s.len()));
    }
    let mut mean = vec![0.0; p];
    for s in snapshots {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / k as f64);
    }
    let centred: Vec<Vec<f64>> = snapshots
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let gram = Matrix::from_fn(k, k, |i, j| linalg::dot(&centred[i], &centred[j]));
    let scale = gram.trace();
    let pairs = linalg::sym_eigen_desc(&gram);
    if !(pairs[0].0 > 1e-24 * scale.max(1.0)) || scale == 0.0 {
        return Err(Error::InvalidArgument("snapshots are identical; no principal direction".into()));
    }
    let direction = |u: &linalg::Vector, lambda: f64| -> Vec<f64> {
        let mut v = vec![0.0; p];
        for (i, c) in centred.iter().enumerate() {
            v.iter_mut().zip(c).for_each(|(a, b)| *a += u[i] * b);
        }
        let n = lambda.sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        v
    };
    let v1 = canonical_sign(direction(&pairs[0].1, pairs[0].0));
    let lambda2 = pairs.get(1).map_or(0.0, |p| p.0);
    let v2 = if lambda2 > 1e-12 * pairs[0].0 {
        let mut v = direction(&pairs[1].1, lambda2);
        // re-orthogonalise against roundoff
        let d = linalg::dot(&v, &v1);
        v.iter_mut().zip(&v1).for_each(|(a, b)| *a -= d * b);
        let n = linalg::norm(&v);
        v.iter_mut().for_each(|a| *a /= n);
        canonical_sign(v)
    } else {
        orthogonal_complement(&v1)
    };
    let denom = (k - 1).max(1) as f64;
    Ok((
        Plane {
            origin: mean,
            dirs: [v1, v2],
        },
        [pairs[0].0 / denom, lambda2.max(0.0) / denom],
    ))
}

fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    v
}

fn orthogonal_complement(v1: &[f64]) -> Vec<f64> {
    let k = (0..v1.len())
        .min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs()))
        .expect("non-empty");
    let mut v: Vec<f64> = v1.iter().map(|x| -x * v1[k]).collect();
    v[k] += 1.0;
    let n = linalg::norm(&v);
    v.iter_mut().for_each(|a| *a /= n);
    v
}

/// Projects snapshots onto their top-2 principal plane and evaluates the
/// loss grid there.
pub fn pca_project<F>(snapshots: &[Vec<f64>], resolution: usize, mode: ExecMode, eval: F) -> Result<Projection>
where
    F: Fn(&[f64]) -> (f64, f64) + Sync + Send,
{
    if snapshots.len() < 3 {
        return Err(Error::InvalidArgument("need at least three snapshots".into()));
    }
    let (plane, explained) = principal_plane(snapshots)?;
    grid_on_plane(plane, explained, snapshots, resolution, mode, eval)
}

/// Loss grid of a toy pair in raw parameter coordinates.
pub fn toy_projection(demo: &ToyDemo, source: &QuadraticTask, transfer: &QuadraticTask, resolution: usize) -> Result<Projection> {
    let plane = Plane {
        origin: vec![0.0, 0.0],
        dirs: [vec![1.0, 0.0], vec![0.0, 1.0]],
    };
    let snaps: Vec<Vec<f64>> = demo.snapshots().iter().map(|s| s.to_vec()).collect();
    grid_on_plane(plane, [1.0, 1.0], &snaps, resolution, ExecMode::Sequential, |t| {
        let t = [t[0], t[1]];
        (source.loss(t), transfer.loss(t))
    })
}
