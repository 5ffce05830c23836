use lfcbm_core::head::{
    elastic_net_objective, fit_dense, fit_head, fit_path, lambda_max, optimality_residual, FitOptions, PathConfig,
};
use lfcbm_core::oracle::{coordinate_descent_oracle, gradient_descent_oracle, oracle_objective};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem(seed: u64, n: usize, m: usize, dz: usize) -> (Array2<f64>, Vec<usize>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, m), || rng.sample::<f64, _>(rand_distr::StandardNormal));
    let labels = (0..n)
        .map(|i| {
            let s: f64 = (0..m).map(|j| x[[i, j]] * ((j % dz) as f64 - 1.0)).sum();
            if s > 0.0 { i % dz } else { (i + 1) % dz }
        })
        .collect();
    (x, labels, (0..dz).map(|k| format!("class{k}")).collect())
}

const TIGHT: FitOptions = FitOptions {
    max_iter: 200_000,
    tol: 1e-10,
};

#[test]
fn matches_coordinate_descent_oracle() {
    for seed in 0..4 {
        let (x, y, names) = problem(seed, 50, 6, 3);
        for alpha in [0.5, 0.99] {
            let lmax = lambda_max(x.view(), &y, 3, alpha).unwrap();
            let lambda = 0.2 * lmax;
            let (head, _) = fit_head(x.view(), &y, &names, alpha, lambda, &TIGHT, None).unwrap();
            let oracle = coordinate_descent_oracle(x.view(), &y, 3, lambda, alpha, 1e-14);
            let f = oracle_objective(x.view(), &y, &head.weights, &head.bias, lambda, alpha);
            let fo = oracle_objective(x.view(), &y, &oracle.weights, &oracle.bias, lambda, alpha);
            approx::assert_abs_diff_eq!(f, fo, epsilon = 1e-6);
            approx::assert_abs_diff_eq!(f, elastic_net_objective(&head, x.view(), &y).unwrap(), epsilon = 1e-9);
            for (a, b) in head.weights.iter().zip(oracle.weights.iter()) {
                approx::assert_abs_diff_eq!(a, b, epsilon = 1e-3);
            }
        }
    }
}

#[test]
fn ridge_limit_matches_gradient_descent() {
    let (x, y, names) = problem(9, 40, 4, 3);
    let lambda = 2.0;
    let (head, info) = fit_head(x.view(), &y, &names, 0.0, lambda, &TIGHT, None).unwrap();
    assert!(info.converged);
    let gd = gradient_descent_oracle(x.view(), &y, 3, lambda, 200_000);
    for (a, b) in head.weights.iter().zip(gd.weights.iter()) {
        approx::assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }
    // softmax biases are only defined up to a shared shift
    let (ma, mb) = (head.bias.mean().unwrap(), gd.bias.mean().unwrap());
    for (a, b) in head.bias.iter().zip(gd.bias.iter()) {
        approx::assert_abs_diff_eq!(a - ma, b - mb, epsilon = 1e-6);
    }
}

#[test]
fn lambda_max_zeroes_every_weight() {
    let (x, y, names) = problem(3, 60, 8, 4);
    let lmax = lambda_max(x.view(), &y, 4, 0.99).unwrap();
    let (head, _) = fit_head(x.view(), &y, &names, 0.99, lmax * 1.0001, &TIGHT, None).unwrap();
    assert!(head.weights.iter().all(|&w| w == 0.0));
    let (head, _) = fit_head(x.view(), &y, &names, 0.99, lmax * 0.9, &TIGHT, None).unwrap();
    assert!(head.weights.iter().any(|&w| w != 0.0));
    assert!(optimality_residual(&head, x.view(), &y) < 1e-6);
}

#[test]
fn path_picks_first_lambda_in_band() {
    let (x, y, names) = problem(4, 120, 20, 3);
    let cfg = PathConfig {
        band: (3.0, 6.0),
        ..PathConfig::default()
    };
    let (head, report) = fit_path(x.view(), &y, x.view(), &y, &names, &cfg).unwrap();
    assert!(report.in_band);
    let chosen = report.chosen;
    assert!(report.steps[..chosen].iter().all(|s| s.mean_nnz < 3.0));
    assert_eq!(head.mean_nnz(), report.steps[chosen].mean_nnz);
    assert!(report.steps.windows(2).all(|w| w[0].lambda > w[1].lambda));
}

#[test]
fn dense_head_has_no_zero_weights() {
    let (x, y, names) = problem(5, 80, 10, 3);
    let (dense, _) = fit_dense(x.view(), &y, &names, &FitOptions::default()).unwrap();
    assert_eq!(dense.mean_nnz(), 10.0);
}
