//! Curvature estimates of a task loss at the current weights.
//!
//! Two families live here. The exact Hessian (finite differences of the
//! analytic gradient) is a brute-force oracle for small networks. The
//! diagonal and Kronecker estimates are empirical-Fisher quantities built
//! from per-example gradients, the ones used for pruning scores at scale.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::net::{Batch, Network, TaskId};
use crate::par::ExecMode;

/// Default cap on the parameter count accepted by [`exact_hessian`].
pub const EXACT_HESSIAN_CAP: usize = 500;
/// Finite-difference step for Hessian entries.
pub const HESSIAN_FD_STEP: f64 = 1e-4;
/// Relative damping applied to each Kronecker factor by default.
pub const KFAC_RELATIVE_DAMPING: f64 = 1e-4;

/// How much to add to a curvature diagonal before inverting it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    Absolute(f64),
    /// `factor · trace(M) / dim(M)`, resolved per matrix.
    Relative(f64),
}

impl Damping {
    pub fn resolve(self, m: &Matrix) -> f64 {
        match self {
            Damping::Absolute(v) => v,
            Damping::Relative(f) => linalg::relative_damping(m, f),
        }
    }

    pub fn is_zero(self) -> bool {
        matches!(self, Damping::Absolute(v) | Damping::Relative(v) if v == 0.0)
    }
}

/// Per-layer Kronecker factors: `A` is `m_l × m_l`, `B` is `h_l × h_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronFactor {
    pub a: Matrix,
    pub b: Matrix,
}

impl KronFactor {
    pub fn param_count(&self) -> usize {
        self.a.nrows() * self.b.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    Exact(Matrix),
    Isotropic,
    Diagonal(Vec<f64>),
    KroneckerBlocks(Vec<KronFactor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureEstimate {
    pub curvature: Curvature,
    pub damping: Damping,
}

impl CurvatureEstimate {
    pub fn kind(&self) -> &'static str {
        match self.curvature {
            Curvature::Exact(_) => "exact",
            Curvature::Isotropic => "isotropic",
            Curvature::Diagonal(_) => "diagonal",
            Curvature::KroneckerBlocks(_) => "kronecker",
        }
    }

    /// Writes the estimate as plain text: `#`-prefixed headers followed by
    /// matrices, one row per line with space-separated decimals.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# curvature {} damping {:?}", self.kind(), self.damping)?;
        match &self.curvature {
            Curvature::Exact(m) => {
                writeln!(w, "# matrix {} {}", m.nrows(), m.ncols())?;
                write_matrix_text(&mut w, m)?;
            }
            Curvature::Isotropic => {}
            Curvature::Diagonal(d) => {
                writeln!(w, "# diagonal {}", d.len())?;
                write_row(&mut w, d.iter().copied())?;
            }
            Curvature::KroneckerBlocks(blocks) => {
                for (l, f) in blocks.iter().enumerate() {
                    writeln!(w, "# layer {l} A {} {}", f.a.nrows(), f.a.ncols())?;
                    write_matrix_text(&mut w, &f.a)?;
                    writeln!(w, "# layer {l} B {} {}", f.b.nrows(), f.b.ncols())?;
                    write_matrix_text(&mut w, &f.b)?;
                }
            }
        }
        Ok(())
    }
}

fn write_row<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            w.write_all(b" ")?;
        }
        write!(w, "{v}")?;
        first = false;
    }
    w.write_all(b"\n")
}

pub fn write_matrix_text<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        write_row(w, m.row(i).iter().copied())?;
    }
    Ok(())
}

/// Reads rows of whitespace-separated decimals, skipping `#` lines.
pub fn read_matrix_text<R: BufRead>(r: R) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<matrix>", e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let row = t
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(format!("line {}", lineno + 1), "ragged matrix row"));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(Matrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

/// Finite-difference Hessian of a gradient field plus its pre-symmetrization
/// asymmetry.
#[derive(Debug, Clone)]
pub struct ExactHessian {
    pub matrix: Matrix,
    pub raw_asymmetry: f64,
}

/// Central differences of `grad` around `theta`: entry `(i, j)` is the
/// derivative of gradient component `j` w.r.t. parameter `i`. Columns are
/// independent and may be computed concurrently.
pub fn fd_hessian<F>(theta: &[f64], step: f64, mode: ExecMode, grad: F) -> Result<ExactHessian>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let p = theta.len();
    let rows = mode.map_range(p, |i| -> Result<Vec<f64>> {
        let mut plus = theta.to_vec();
        plus[i] += step;
        let mut minus = theta.to_vec();
        minus[i] -= step;
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        if gp.len() != p {
            return Err(Error::dim("gradient length", p, gp.len()));
        }
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect())
    });
    let mut matrix = Matrix::zeros(p, p);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate() {
            matrix[(i, j)] = v;
        }
    }
    let raw_asymmetry = linalg::asymmetry(&matrix);
    linalg::symmetrize(&mut matrix);
    Ok(ExactHessian {
        matrix,
        raw_asymmetry,
    })
}

/// Hessian of the mean batch loss w.r.t. encoder weights.
pub fn exact_hessian(
    net: &Network,
    batch: &Batch,
    task: TaskId,
    cap: usize,
    mode: ExecMode,
) -> Result<ExactHessian> {
    let p = net.param_count();
    if p > cap {
        return Err(Error::TooLarge {
            what: "exact Hessian parameter count",
            size: p,
            cap,
        });
    }
    net.head(task)?;
    fd_hessian(net.weights(), HESSIAN_FD_STEP, mode, |w| {
        net.with_weights(w.to_vec())?.grad(batch, task)
    })
}

/// Hessian-vector product by central differences of the gradient with step
/// `1e-4 / max(1, ‖v‖∞)`.
pub fn hvp(net: &Network, batch: &Batch, task: TaskId, v: &[f64]) -> Result<Vec<f64>> {
    let p = net.param_count();
    if v.len() != p {
        return Err(Error::dim("hvp direction", p, v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hvp direction".into()));
    }
    let vmax = linalg::max_abs(v.iter().copied());
    if vmax == 0.0 {
        return Ok(vec![0.0; p]);
    }
    let eps = HESSIAN_FD_STEP / vmax.max(1.0);
    let shifted = |sign: f64| {
        let w: Vec<f64> = net
            .weights()
            .iter()
            .zip(v)
            .map(|(w, d)| w + sign * eps * d)
            .collect();
        net.with_weights(w)?.grad(batch, task)
    };
    let gp = shifted(1.0)?;
    let gm = shifted(-1.0)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Mean of squared per-example gradients. Per layer this is
/// `(G∘G)(A∘A)ᵀ / n`, the diagonal of the summed `(a⊗g)(a⊗g)ᵀ`.
pub fn fisher_diag(net: &Network, batch: &Batch, task: TaskId) -> Result<Vec<f64>> {
    let signals = net.layer_signals(batch, task)?;
    let inv_n = 1.0 / batch.len() as f64;
    let mut out = vec![0.0; net.param_count()];
    for (l, sig) in signals.iter().enumerate() {
        let a2 = sig.inputs.map(|v| v * v);
        let g2 = sig.pre_grads.map(|v| v * v);
        let block = (g2 * a2.transpose()) * inv_n;
        out[net.layer_range(l)].copy_from_slice(block.as_slice());
    }
    Ok(out)
}

/// `A_l = E[a aᵀ]`, `B_l = E[∇z (∇z)ᵀ]` per layer.
pub fn kfac_factors(net: &Network, batch: &Batch, task: TaskId) -> Result<Vec<KronFactor>> {
    let signals = net.layer_signals(batch, task)?;
    let inv_n = 1.0 / batch.len() as f64;
    Ok(signals
        .iter()
        .map(|sig| KronFactor {
            a: (&sig.inputs * sig.inputs.transpose()) * inv_n,
            b: (&sig.pre_grads * sig.pre_grads.transpose()) * inv_n,
        })
        .collect())
}

/// Floats stored by the factored representation, `Σ m_l² + h_l²`.
pub fn kron_stored_floats(blocks: &[KronFactor]) -> usize {
    blocks
        .iter()
        .map(|f| f.a.nrows() * f.a.nrows() + f.b.nrows() * f.b.nrows())
        .sum()
}

/// Floats a dense per-layer block would need, `Σ p_l²`.
pub fn kron_dense_floats(blocks: &[KronFactor]) -> usize {
    blocks.iter().map(|f| f.param_count() * f.param_count()).sum()
}

/// Inverses of the damped factors of every layer, giving `[H⁻¹]_jj` and
/// individual columns of `A⁻¹ ⊗ B⁻¹` without materialising the block.
#[derive(Debug, Clone)]
pub struct KronInverse {
    layers: Vec<(Matrix, Matrix)>,
    offsets: Vec<usize>,
}

impl KronInverse {
    pub fn new(blocks: &[KronFactor], damping: Damping) -> Result<Self> {
        let mut layers = Vec::with_capacity(blocks.len());
        let mut offsets = vec![0];
        for (l, f) in blocks.iter().enumerate() {
            let a_inv = invert_factor(&f.a, damping, &format!("layer {l} factor A"))?;
            let b_inv = invert_factor(&f.b, damping, &format!("layer {l} factor B"))?;
            offsets.push(offsets[l] + f.param_count());
            layers.push((a_inv, b_inv));
        }
        Ok(Self { layers, offsets })
    }

    pub fn param_count(&self) -> usize {
        *self.offsets.last().expect("non-empty offsets")
    }

    pub fn layer_inverses(&self, l: usize) -> (&Matrix, &Matrix) {
        let (a, b) = &self.layers[l];
        (a, b)
    }

    /// `[A⁻¹]_rr · [B⁻¹]_kk` for every flat index `j = offset + r·h + k`.
    pub fn diag(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (a_inv, b_inv) in &self.layers {
            for r in 0..a_inv.nrows() {
                let ar = a_inv[(r, r)];
                out.extend((0..b_inv.nrows()).map(|k| ar * b_inv[(k, k)]));
            }
        }
        out
    }

    /// Column `j` of the layer block containing `j`; returns the layer's flat
    /// index range with the column values over it.
    pub fn column(&self, j: usize) -> Result<(std::ops::Range<usize>, Vec<f64>)> {
        if j >= self.param_count() {
            return Err(Error::dim("parameter index", self.param_count(), j));
        }
        let l = self.offsets.partition_point(|&o| o <= j) - 1;
        let (a_inv, b_inv) = &self.layers[l];
        let h = b_inv.nrows();
        let local = j - self.offsets[l];
        let (r, k) = (local / h, local % h);
        let mut col = Vec::with_capacity(a_inv.nrows() * h);
        for r2 in 0..a_inv.nrows() {
            let ar = a_inv[(r2, r)];
            col.extend((0..h).map(|k2| ar * b_inv[(k2, k)]));
        }
        Ok((self.offsets[l]..self.offsets[l + 1], col))
    }
}

fn invert_factor(m: &Matrix, damping: Damping, context: &str) -> Result<Matrix> {
    let lambda = damping.resolve(m);
    let damped = linalg::damped(m, lambda);
    if lambda == 0.0 && linalg::spd_condition(&damped) > 1e14 {
        return Err(Error::Singular(format!("{context} (damping is zero)")));
    }
    linalg::spd_inverse(&damped, context)
}
