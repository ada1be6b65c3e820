//! Small dense linear-algebra helpers over `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn cholesky(m: &Matrix, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("{context} (square)"), m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::Singular(context.to_string()))
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub fn spd_inverse(m: &Matrix, context: &str) -> Result<Matrix> {
    Ok(cholesky(m, context)?.inverse())
}

/// Solves `m x = rhs` for symmetric positive-definite `m` with a
/// square-root-free `LDLᵀ` factorization. Diagonal systems are solved by
/// plain division, so exact quotients stay exact.
pub fn ldl_solve(m: &Matrix, rhs: &Matrix, context: &str) -> Result<Matrix> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dim(format!("{context} (square)"), n, m.ncols()));
    }
    if rhs.nrows() != n {
        return Err(Error::dim(format!("{context} right-hand side"), n, rhs.nrows()));
    }
    if m.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let mut l = Matrix::identity(n, n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if !(dj > 0.0) {
            return Err(Error::Singular(context.to_string()));
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = v / dj;
        }
    }
    let mut x = rhs.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v;
        }
        for i in 0..n {
            x[(i, c)] /= d[i];
        }
        for i in (0..n).rev() {
            let mut v = x[(i, c)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = v;
        }
    }
    Ok(x)
}

/// Adds `lambda` to the diagonal.
pub fn damped(m: &Matrix, lambda: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += lambda;
    }
    out
}

/// `factor * trace(m) / dim(m)`.
pub fn relative_damping(m: &Matrix, factor: f64) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    factor * m.trace() / m.nrows() as f64
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest `|m_ij - m_ji|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Eigen-pairs of a symmetric matrix sorted by descending eigenvalue.
pub fn sym_eigen_desc(m: &Matrix) -> Vec<(f64, Vector)> {
    let eig = SymmetricEigen::new(m.clone());
    let mut pairs: Vec<(f64, Vector)> = (0..m.nrows())
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Spectral condition number of a symmetric matrix; infinite when it is not
/// positive definite.
pub fn spd_condition(m: &Matrix) -> f64 {
    let vals = sym_eigenvalues(m);
    match (vals.first(), vals.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
