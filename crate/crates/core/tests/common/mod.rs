#![allow(dead_code)]

use prunelab::linalg::Matrix;
use prunelab::net::{Batch, Head, LayerSpec, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let inputs = gaussian(rng, n * dim);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, labels, dim, classes).unwrap()
}

pub fn with_random_head(mut net: Network, rng: &mut ChaCha8Rng, classes: usize) -> Network {
    let h = net.feature_dim();
    let values = gaussian(rng, h * classes).into_iter().map(|v| 0.5 * v).collect();
    net.set_head(0, Head::new(h, classes, values).unwrap()).unwrap();
    net
}

/// ReLU MLP with He weights, a random head for task 0 and a random batch.
pub fn problem(seed: u64, dims: &[usize], classes: usize, n: usize) -> (Network, Batch) {
    let mut r = rng(seed);
    let mut net = Network::mlp(dims).unwrap();
    net.init_he(&mut r);
    let net = with_random_head(net, &mut r, classes);
    let batch = random_batch(&mut r, n, dims[0], classes);
    (net, batch)
}

/// One linear layer `m → h` with random weights and head.
pub fn linear_problem(seed: u64, m: usize, h: usize, classes: usize, n: usize) -> (Network, Batch) {
    let mut r = rng(seed);
    let mut net = Network::new(vec![LayerSpec::new(m, h, false)]).unwrap();
    let w = gaussian(&mut r, m * h);
    net.set_weights(w).unwrap();
    let net = with_random_head(net, &mut r, classes);
    let batch = random_batch(&mut r, n, m, classes);
    (net, batch)
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &m * m.transpose() + Matrix::identity(n, n) * (0.5 * n as f64)
}

pub fn central_diff_grad(net: &Network, batch: &Batch, step: f64) -> Vec<f64> {
    (0..net.param_count())
        .map(|j| {
            let mut w = net.weights().to_vec();
            w[j] += step;
            let up = net.with_weights(w.clone()).unwrap().loss(batch, 0).unwrap();
            w[j] -= 2.0 * step;
            let down = net.with_weights(w).unwrap().loss(batch, 0).unwrap();
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Minimum of `δᵀHδ` with `δ_j = −θ_j`, via the Schur complement of the
/// free block: `θ_j² (H_jj − H_jF H_FF⁻¹ H_Fj)`. Also returns the optimal δ.
pub fn schur_constrained(h: &Matrix, theta: &[f64], j: usize) -> (f64, Vec<f64>) {
    let p = theta.len();
    let free: Vec<usize> = (0..p).filter(|&i| i != j).collect();
    let mut delta = vec![0.0; p];
    delta[j] = -theta[j];
    if free.is_empty() {
        return (theta[j] * theta[j] * h[(j, j)], delta);
    }
    let hff = Matrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let hfj = Matrix::from_fn(free.len(), 1, |a, _| h[(free[a], j)]);
    let inv = hff.clone().try_inverse().expect("SPD block");
    let schur = h[(j, j)] - (hfj.transpose() * &inv * &hfj)[(0, 0)];
    let rest = -(&inv * &hfj) * delta[j];
    for (a, &i) in free.iter().enumerate() {
        delta[i] = rest[(a, 0)];
    }
    (theta[j] * theta[j] * schur, delta)
}

pub fn quad_form(h: &Matrix, d: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            s += d[i] * h[(i, j)] * d[j];
        }
    }
    s
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
