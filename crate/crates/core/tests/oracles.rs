mod common;

use common::*;
use prunelab::hessian::{self, Damping, KronFactor, KronInverse};
use prunelab::linalg::{self, Matrix, Vector};
use prunelab::net::Batch;
use prunelab::probe;
use prunelab::saliency::{self, ObsCurvature};
use prunelab::ExecMode;

#[test]
fn gradients_match_central_differences_across_widths() {
    let grid: [&[usize]; 5] = [&[3, 2], &[3, 4, 2], &[5, 3, 6], &[4, 6, 5, 3], &[2, 8, 8, 4]];
    for (i, dims) in grid.iter().enumerate() {
        let (net, batch) = problem(10 + i as u64, dims, 3, 6);
        let analytic = net.grad(&batch, 0).unwrap();
        let fd = central_diff_grad(&net, &batch, 1e-5);
        let dev = max_abs_diff(&analytic, &fd);
        assert!(dev < 1e-6, "{dims:?}: {dev:e}");
    }
}

#[test]
fn linear_mse_hessian_has_kronecker_closed_form() {
    let (m, h, c, n) = (3, 2, 4, 5);
    let (net, batch) = linear_problem(3, m, h, c, n);
    let exact = hessian::exact_hessian(&net, &batch, 0, 500, ExecMode::Sequential).unwrap();
    let x = batch.columns();
    let exx = (x * x.transpose()) / n as f64;
    let head = net.head(0).unwrap();
    // H[(r,k),(r',k')] = (2/C) E[x_r x_r'] Σ_c ξ_kc ξ_k'c
    let mut dev: f64 = 0.0;
    for r in 0..m {
        for k in 0..h {
            for r2 in 0..m {
                for k2 in 0..h {
                    let xi: f64 = (0..c).map(|cc| head.get(k, cc) * head.get(k2, cc)).sum();
                    let expected = 2.0 / c as f64 * exx[(r, r2)] * xi;
                    dev = dev.max((exact.matrix[(r * h + k, r2 * h + k2)] - expected).abs());
                }
            }
        }
    }
    assert!(dev < 1e-6, "{dev:e}");
    assert!(exact.raw_asymmetry < 1e-5);
}

#[test]
fn exact_hessian_refuses_large_networks() {
    let (net, batch) = problem(1, &[30, 20], 2, 2);
    assert!(hessian::exact_hessian(&net, &batch, 0, 500, ExecMode::Sequential).is_err());
}

#[test]
fn hvp_matches_dense_product_and_is_linear() {
    let (net, batch) = problem(4, &[4, 5, 3], 3, 8);
    let exact = hessian::exact_hessian(&net, &batch, 0, 500, ExecMode::Sequential).unwrap();
    let mut r = rng(9);
    let v = gaussian(&mut r, net.param_count());
    let hv = hessian::hvp(&net, &batch, 0, &v).unwrap();
    let dense: Vec<f64> = (&exact.matrix * Vector::from_column_slice(&v)).iter().copied().collect();
    assert!(rel_norm_diff(&hv, &dense) < 1e-3);

    let scaled: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
    let hv3 = hessian::hvp(&net, &batch, 0, &scaled).unwrap();
    let expect: Vec<f64> = hv.iter().map(|x| 3.0 * x).collect();
    assert!(rel_norm_diff(&hv3, &expect) < 1e-4);

    let zero = hessian::hvp(&net, &batch, 0, &vec![0.0; net.param_count()]).unwrap();
    assert!(zero.iter().all(|&z| z == 0.0));
}

#[test]
fn fisher_diag_is_diagonal_of_dense_outer_products() {
    let (net, batch) = problem(5, &[3, 4, 2], 3, 7);
    let g = net.per_example_grads(&batch, 0).unwrap();
    let dense = g.transpose() * &g / batch.len() as f64;
    let diag = hessian::fisher_diag(&net, &batch, 0).unwrap();
    for j in 0..net.param_count() {
        assert!((diag[j] - dense[(j, j)]).abs() < 1e-10);
        assert!(diag[j] >= 0.0);
    }
    let one = batch.select(&[2]);
    let grad = net.grad(&one, 0).unwrap();
    let diag1 = hessian::fisher_diag(&net, &one, 0).unwrap();
    for j in 0..net.param_count() {
        assert!((diag1[j] - grad[j] * grad[j]).abs() < 1e-12);
    }
}

#[test]
fn kfac_factors_are_psd_and_exact_for_one_example() {
    let (net, batch) = problem(6, &[5, 3, 6], 4, 9);
    for f in hessian::kfac_factors(&net, &batch, 0).unwrap() {
        assert!(linalg::sym_eigenvalues(&f.a)[0] >= -1e-10);
        assert!(linalg::sym_eigenvalues(&f.b)[0] >= -1e-10);
    }
    let one = batch.select(&[4]);
    let g = net.grad(&one, 0).unwrap();
    for (l, f) in hessian::kfac_factors(&net, &one, 0).unwrap().iter().enumerate() {
        let gl = &g[net.layer_range(l)];
        let outer = Matrix::from_fn(gl.len(), gl.len(), |i, j| gl[i] * gl[j]);
        let dev = (linalg::kron(&f.a, &f.b) - outer).abs().max();
        assert!(dev < 1e-10, "layer {l}: {dev:e}");
    }
}

#[test]
fn kronecker_inverse_diagonal_matches_dense_inverse() {
    let mut r = rng(7);
    let a = random_spd(&mut r, 3);
    let b = random_spd(&mut r, 2);
    let inv = KronInverse::new(&[KronFactor { a: a.clone(), b: b.clone() }], Damping::Absolute(0.0)).unwrap();
    let dense = linalg::kron(&a, &b).try_inverse().unwrap();
    let diag = inv.diag();
    for j in 0..6 {
        assert!((diag[j] - dense[(j, j)]).abs() < 1e-12);
        let (range, col) = inv.column(j).unwrap();
        assert_eq!(range, 0..6);
        for i in 0..6 {
            assert!((col[i] - dense[(i, j)]).abs() < 1e-12);
        }
    }
}

#[test]
fn block_scores_match_dense_obs_for_one_example() {
    let (net, batch) = linear_problem(8, 4, 3, 3, 1);
    let lambda = 1e-2;
    let factors = hessian::kfac_factors(&net, &batch, 0).unwrap();
    let block = saliency::score_block(net.weights(), &factors, Damping::Absolute(lambda)).unwrap();
    let f = &factors[0];
    let dense = linalg::kron(&linalg::damped(&f.a, lambda), &linalg::damped(&f.b, lambda));
    let exact = saliency::score_exact_obs(net.weights(), &dense, Damping::Absolute(0.0)).unwrap();
    for j in 0..net.param_count() {
        let rel = (block.values[j] - exact.values[j]).abs() / exact.values[j].abs().max(1e-300);
        assert!(rel < 1e-6, "{j}: {rel:e}");
    }
    let kinv = KronInverse::new(&factors, Damping::Absolute(lambda)).unwrap();
    let dinv = dense.try_inverse().unwrap();
    for j in 0..net.param_count() {
        let a = saliency::obs_update(net.weights(), ObsCurvature::Blocks(&kinv), j).unwrap();
        let b = saliency::obs_update(net.weights(), ObsCurvature::DenseInverse(&dinv), j).unwrap();
        assert!(rel_norm_diff(&a, &b) < 1e-8);
        assert_eq!(a[j] + net.weights()[j], 0.0);
    }
}

#[test]
fn obs_two_parameter_quadratic() {
    let h = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let theta = [0.9, -0.4];
    let scores = saliency::score_exact_obs(&theta, &h, Damping::Absolute(0.0)).unwrap();
    let inv = h.clone().try_inverse().unwrap();
    for j in 0..2 {
        let (best, best_delta) = schur_constrained(&h, &theta, j);
        assert!((scores.values[j] - best).abs() < 1e-12);
        let delta = saliency::obs_update(&theta, ObsCurvature::DenseInverse(&inv), j).unwrap();
        assert!((quad_form(&h, &delta) - scores.values[j]).abs() < 1e-10);
        assert!(max_abs_diff(&delta, &best_delta) < 1e-12);
    }
    // brute-force ranking: removing the smaller constrained increase first
    let (e0, _) = schur_constrained(&h, &theta, 0);
    let (e1, _) = schur_constrained(&h, &theta, 1);
    assert_eq!(scores.values[0] > scores.values[1], e0 > e1);
}

#[test]
fn grasp_matches_dense_hessian_oracle() {
    let (net, batch) = problem(11, &[4, 5, 3], 3, 10);
    let g = net.grad(&batch, 0).unwrap();
    let h = hessian::exact_hessian(&net, &batch, 0, 500, ExecMode::Sequential).unwrap();
    let hg = &h.matrix * Vector::from_column_slice(&g);
    let oracle: Vec<f64> = net.weights().iter().zip(hg.iter()).map(|(w, v)| -w * v).collect();
    let scores = saliency::score_grasp(&net, &batch, 0).unwrap();
    assert!(rel_norm_diff(&scores.values, &oracle) < 1e-3);
}

#[test]
fn grasp_is_unchanged_by_duplicating_the_batch() {
    let (net, batch) = problem(12, &[3, 4, 2], 3, 6);
    let doubled: Vec<usize> = (0..6).chain(0..6).collect();
    let a = saliency::score_grasp(&net, &batch, 0).unwrap();
    let b = saliency::score_grasp(&net, &batch.select(&doubled), 0).unwrap();
    assert!(rel_norm_diff(&b.values, &a.values) < 1e-8);
}

#[test]
fn snip_matches_scalar_oracle_and_sign_symmetry() {
    let (net, batch) = problem(13, &[3, 4, 2], 3, 6);
    let g = net.grad(&batch, 0).unwrap();
    let s = saliency::score_snip(&net, &batch, 0, true).unwrap();
    for j in 0..net.param_count() {
        assert_eq!(s.values[j], (g[j] * net.weights()[j]).abs());
    }
    let signed = saliency::score_snip(&net, &batch, 0, false).unwrap();
    for j in 0..net.param_count() {
        assert_eq!(signed.values[j], g[j] * net.weights()[j]);
    }

    // flip input column r and every weight reading it on a linear net
    let (lin, lb) = linear_problem(14, 4, 3, 3, 8);
    let r = 2;
    let h = 3;
    let mut w = lin.weights().to_vec();
    for k in 0..h {
        w[r * h + k] = -w[r * h + k];
    }
    let flipped_net = lin.with_weights(w).unwrap();
    let mut inputs = lb.inputs().to_vec();
    for i in 0..lb.len() {
        inputs[i * 4 + r] = -inputs[i * 4 + r];
    }
    let flipped_batch = Batch::new(inputs, lb.labels().to_vec(), 4, 3).unwrap();
    let a = saliency::score_snip(&lin, &lb, 0, true).unwrap();
    let b = saliency::score_snip(&flipped_net, &flipped_batch, 0, true).unwrap();
    assert!(max_abs_diff(&a.values, &b.values) < 1e-14);
}

#[test]
fn scores_do_not_depend_on_example_order() {
    let (net, batch) = problem(15, &[3, 4, 2], 3, 7);
    let rev: Vec<usize> = (0..7).rev().collect();
    let shuffled = batch.select(&rev);
    let opts = saliency::ScoreOptions::default();
    for m in saliency::Method::ALL {
        // away from a minimum the true Hessian may be indefinite; both orders
        // must then be refused alike
        match (
            saliency::score_network(m, &net, &batch, 0, &opts),
            saliency::score_network(m, &net, &shuffled, 0, &opts),
        ) {
            (Ok(a), Ok(b)) => assert!(rel_norm_diff(&b.values, &a.values) < 1e-9, "{m}"),
            (Err(_), Err(_)) => assert_eq!(m, saliency::Method::ExactObs),
            _ => panic!("{m}: order changed the outcome"),
        }
    }
}

#[test]
fn ridge_closed_form_matches_gradient_descent() {
    let mut r = rng(16);
    let (n, h, c) = (30, 5, 3);
    let phi = Matrix::from_vec(n, h, gaussian(&mut r, n * h));
    let y = Matrix::from_fn(n, c, |i, k| (i % c == k) as u8 as f64);
    for alpha in [0.5, 1.0, 4.0] {
        let xi = probe::fit_ridge(&phi, &y, alpha).unwrap();
        assert!(probe::normal_equation_residual(&phi, &y, alpha, &xi) < 1e-8);
        // plain descent on ‖Y − Φξ‖² + α‖ξ‖²
        let gram = phi.transpose() * &phi;
        let top = linalg::sym_eigenvalues(&gram).last().copied().unwrap() + alpha;
        let step = 0.5 / top;
        let mut g_xi = Matrix::zeros(h, c);
        for _ in 0..50_000 {
            let grad = (phi.transpose() * (&phi * &g_xi - &y) + &g_xi * alpha) * 2.0;
            g_xi -= grad * step;
        }
        assert!((g_xi - &xi).abs().max() < 1e-6);
        let obj = probe::ridge_objective(&phi, &y, alpha, &xi);
        let nudged = &xi + Matrix::from_element(h, c, 1e-4);
        assert!(probe::ridge_objective(&phi, &y, alpha, &nudged) > obj);
    }
}

#[test]
fn ridge_on_identity_features_halves_targets_exactly() {
    let y = Matrix::from_fn(5, 3, |i, k| (i % 3 == k) as u8 as f64);
    let xi = probe::fit_ridge(&Matrix::identity(5, 5), &y, 1.0).unwrap();
    assert_eq!(xi, y / 2.0);
}
