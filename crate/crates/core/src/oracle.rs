//! Brute-force reference implementations used to check the production
//! solvers and gradients. Nothing here calls into `head` solver code.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::head::SparseHead;

fn softmax_row(z: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Summed cross-entropy plus `λ[(1-α)/2 ‖W‖² + α ‖W‖₁]`, written out
/// independently of the production objective.
pub fn oracle_objective(
    x: ArrayView2<f64>,
    labels: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
    lambda: f64,
    alpha: f64,
) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<f64> = (0..w.nrows())
            .map(|k| (0..w.ncols()).map(|j| w[[k, j]] * x[[i, j]]).sum::<f64>() + b[k])
            .collect();
        total += log_sum_exp(&z) - z[y];
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    for &v in w.iter() {
        sq += v * v;
        abs += v.abs();
    }
    total + lambda * ((1.0 - alpha) / 2.0 * sq + alpha * abs)
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Cyclic coordinate descent: each weight is minimized exactly over the
/// quadratic majorizer with curvature `¼ Σ_i x_ij²`, which reduces to one
/// soft-threshold. Bias coordinates use the bound `¼ N`. Sweeps stop when
/// the objective changes by less than `tol`.
pub fn coordinate_descent_oracle(
    x: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    lambda: f64,
    alpha: f64,
    tol: f64,
) -> SparseHead {
    let (n, m) = x.dim();
    let (l1, l2) = (lambda * alpha, lambda * (1.0 - alpha));
    let mut w = Array2::<f64>::zeros((classes, m));
    let mut b = Array1::<f64>::zeros(classes);
    let mut logits = Array2::<f64>::zeros((n, classes));
    let curv: Vec<f64> = (0..m).map(|j| 0.25 * x.column(j).iter().map(|v| v * v).sum::<f64>()).collect();
    let bias_curv = 0.25 * n as f64;
    let probs = |logits: &Array2<f64>| {
        let mut p = logits.clone();
        for mut row in p.axis_iter_mut(Axis(0)) {
            softmax_row(row.as_slice_mut().expect("contiguous"));
        }
        p
    };
    let mut prev = oracle_objective(x, labels, &w, &b, lambda, alpha);
    for _sweep in 0..1_000_000 {
        for k in 0..classes {
            // bias
            let p = probs(&logits);
            let g: f64 = (0..n).map(|i| p[[i, k]] - (labels[i] == k) as u8 as f64).sum();
            let step = g / bias_curv;
            b[k] -= step;
            logits.column_mut(k).mapv_inplace(|v| v - step);
            for j in 0..m {
                if curv[j] == 0.0 {
                    continue;
                }
                let p = probs(&logits);
                let g: f64 = (0..n)
                    .map(|i| (p[[i, k]] - (labels[i] == k) as u8 as f64) * x[[i, j]])
                    .sum();
                let old = w[[k, j]];
                let new = soft(curv[j] * old - g, l1) / (curv[j] + l2);
                if new != old {
                    let d = new - old;
                    w[[k, j]] = new;
                    for i in 0..n {
                        logits[[i, k]] += d * x[[i, j]];
                    }
                }
            }
        }
        let obj = oracle_objective(x, labels, &w, &b, lambda, alpha);
        if (prev - obj).abs() < tol {
            break;
        }
        prev = obj;
    }
    let names = (0..classes).map(|k| format!("class{k}")).collect();
    SparseHead::new(w, b, names, lambda, alpha)
}

/// Plain fixed-step gradient descent on the smooth ridge objective
/// (`α = 0`), a third solver for triangulation.
pub fn gradient_descent_oracle(
    x: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    lambda: f64,
    iterations: usize,
) -> SparseHead {
    let (n, m) = x.dim();
    let frob: f64 = x.iter().map(|v| v * v).sum::<f64>() + n as f64;
    let step = 1.0 / (0.5 * frob + lambda);
    let mut w = Array2::<f64>::zeros((classes, m));
    let mut b = Array1::<f64>::zeros(classes);
    for _ in 0..iterations {
        let mut p = x.dot(&w.t()) + &b;
        for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
            softmax_row(row.as_slice_mut().expect("contiguous"));
            row[labels[i]] -= 1.0;
        }
        let gw = p.t().dot(&x) + &(&w * lambda);
        let gb = p.sum_axis(Axis(0));
        w.scaled_add(-step, &gw);
        b.scaled_add(-step, &gb);
    }
    let names = (0..classes).map(|k| format!("class{k}")).collect();
    SparseHead::new(w, b, names, lambda, 0.0)
}

/// Central differences of `loss` at `w`.
pub fn finite_diff_grad<F>(loss: F, w: &Array2<f64>, eps: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    assert!(eps > 0.0, "step must be positive");
    let mut g = Array2::zeros(w.dim());
    let mut probe = w.clone();
    for idx in ndarray::indices(w.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + eps;
        let up = loss(&probe);
        probe[idx] = orig - eps;
        let down = loss(&probe);
        probe[idx] = orig;
        g[idx] = (up - down) / (2.0 * eps);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn quadratic_calibration() {
        let a = arr2(&[[1.0, -2.0], [0.5, 3.0]]);
        let f = |w: &Array2<f64>| w.iter().zip(a.iter()).map(|(x, c)| c * x * x).sum::<f64>();
        let w = arr2(&[[0.3, -0.1], [2.0, 0.7]]);
        let g = finite_diff_grad(f, &w, 1e-4);
        for ((&gi, &c), &wi) in g.iter().zip(a.iter()).zip(w.iter()) {
            assert!((gi - 2.0 * c * wi).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_zero_at_large_lambda() {
        let x = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]]);
        let h = coordinate_descent_oracle(x.view(), &[0, 1, 0, 1], 2, 100.0, 1.0, 1e-14);
        assert!(h.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_of_zero_head() {
        let x = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let w = Array2::zeros((3, 2));
        let b = Array1::zeros(3);
        let v = oracle_objective(x.view(), &[0, 1, 2], &w, &b, 1.0, 0.5);
        assert!((v - 3.0 * 3f64.ln()).abs() < 1e-12);
    }
}
