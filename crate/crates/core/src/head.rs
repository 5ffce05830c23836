//! Sparse final layer: multinomial logistic regression on standardized
//! concept activations with an elastic-net penalty,
//!
//! ```text
//! Σ_i CE(W a_i + b, y_i) + λ [ (1-α)/2 ‖W‖²_F + α ‖W‖_{1,1} ]
//! ```
//!
//! minimized by accelerated proximal gradient with backtracking and
//! adaptive restart. The bias is never penalized.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{read_lines, write_lines, BundleError};
use crate::npy::{self, NpyError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("solver diverged: non-finite objective at iteration {0}")]
    Divergence(usize),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("head i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("head metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Final linear layer mapping concept activations to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub class_names: Vec<String>,
    pub lambda: f64,
    pub alpha: f64,
    pub nnz_per_class: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    lambda: f64,
    alpha: f64,
    nnz_per_class: Vec<usize>,
}

impl SparseHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, class_names: Vec<String>, lambda: f64, alpha: f64) -> Self {
        let mut h = Self {
            weights,
            bias,
            class_names,
            lambda,
            alpha,
            nnz_per_class: Vec::new(),
        };
        h.recount_nnz();
        h
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.weights.ncols()
    }

    pub fn recount_nnz(&mut self) {
        self.nnz_per_class = self
            .weights
            .axis_iter(Axis(0))
            .map(|r| r.iter().filter(|&&v| v != 0.0).count())
            .collect();
    }

    pub fn mean_nnz(&self) -> f64 {
        if self.nnz_per_class.is_empty() {
            return 0.0;
        }
        self.nnz_per_class.iter().sum::<usize>() as f64 / self.nnz_per_class.len() as f64
    }

    /// Rounds every parameter to `f32`, the precision of persisted heads.
    pub fn quantized(&self) -> SparseHead {
        let mut h = self.clone();
        h.weights.mapv_inplace(|v| v as f32 as f64);
        h.bias.mapv_inplace(|v| v as f32 as f64);
        h.recount_nnz();
        h
    }

    pub fn logits(&self, activations: &[f64]) -> Result<Vec<f64>, HeadError> {
        if activations.len() != self.num_concepts() {
            return Err(HeadError::Shape(format!(
                "activation length {} but head has {} concepts",
                activations.len(),
                self.num_concepts()
            )));
        }
        Ok(self
            .weights
            .axis_iter(Axis(0))
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(activations).map(|(w, a)| w * a).sum::<f64>() + b)
            .collect())
    }

    /// Logits and the winning class (lowest index among ties).
    pub fn predict(&self, activations: &[f64]) -> Result<(Vec<f64>, usize), HeadError> {
        let logits = self.logits(activations)?;
        let class = argmax(&logits);
        Ok((logits, class))
    }

    pub fn predict_all(&self, activations: ArrayView2<f64>) -> Vec<usize> {
        let logits = activations.dot(&self.weights.t()) + &self.bias;
        logits
            .axis_iter(Axis(0))
            .map(|r| argmax(r.as_slice().expect("contiguous")))
            .collect()
    }

    pub fn accuracy(&self, activations: ArrayView2<f64>, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let preds = self.predict_all(activations);
        preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<(), HeadError> {
        fs::create_dir_all(dir)?;
        npy::write_tensor(&Tensor::from_array(&self.weights)?, dir.join("W_F.npy"))?;
        let b = self.bias.clone().insert_axis(Axis(0));
        npy::write_tensor(&Tensor::from_array(&b)?, dir.join("b_F.npy"))?;
        write_lines(&dir.join("classes.txt"), &self.class_names)?;
        let meta = HeadMeta {
            lambda: self.lambda,
            alpha: self.alpha,
            nnz_per_class: self.nnz_per_class.clone(),
        };
        fs::write(dir.join("head.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HeadError> {
        let w = npy::read_tensor(dir.join("W_F.npy"))?;
        let b = npy::read_tensor(dir.join("b_F.npy"))?;
        let classes = read_lines(&dir.join("classes.txt"))?;
        let meta: HeadMeta = serde_json::from_str(&fs::read_to_string(dir.join("head.json"))?)?;
        if b.shape() != (1, w.rows()) || classes.len() != w.rows() {
            return Err(HeadError::Shape(format!(
                "W_F {:?}, b_F {:?}, {} class names",
                w.shape(),
                b.shape(),
                classes.len()
            )));
        }
        let head = SparseHead::new(
            w.to_array(),
            Array1::from(b.row(0).iter().map(|&v| v as f64).collect::<Vec<_>>()),
            classes,
            meta.lambda,
            meta.alpha,
        );
        Ok(head)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Soft-threshold: `sign(v) * max(|v| - t, 0)`.
pub fn prox_l1(v: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn check_data(activations: ArrayView2<f64>, labels: &[usize], classes: usize) -> Result<(), HeadError> {
    if activations.nrows() != labels.len() {
        return Err(HeadError::Shape(format!(
            "{} activation rows but {} labels",
            activations.nrows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(HeadError::Shape(format!("label {y} with {classes} classes")));
    }
    Ok(())
}

/// Softmax probabilities minus one-hot labels, and the summed
/// cross-entropy, for logits `A Wᵀ + b`.
fn residuals(
    activations: ArrayView2<f64>,
    labels: &[usize],
    weights: &Array2<f64>,
    bias: &Array1<f64>,
) -> (f64, Array2<f64>) {
    let mut r = activations.dot(&weights.t()) + bias;
    let mut ce = 0.0;
    for (mut row, &y) in r.axis_iter_mut(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        ce += sum.ln() - (row[y].ln());
        row.mapv_inplace(|v| v / sum);
        row[y] -= 1.0;
    }
    (ce, r)
}

/// Summed cross-entropy plus the elastic-net penalty.
pub fn elastic_net_objective(head: &SparseHead, activations: ArrayView2<f64>, labels: &[usize]) -> Result<f64, HeadError> {
    check_data(activations, labels, head.num_classes())?;
    if activations.ncols() != head.num_concepts() {
        return Err(HeadError::Shape(format!(
            "{} activation columns but head has {} concepts",
            activations.ncols(),
            head.num_concepts()
        )));
    }
    let (ce, _) = residuals(activations, labels, &head.weights, &head.bias);
    Ok(ce + penalty(&head.weights, head.lambda, head.alpha))
}

fn penalty(w: &Array2<f64>, lambda: f64, alpha: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sq: f64 = w.iter().map(|v| v * v).sum();
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    lambda * ((1.0 - alpha) * 0.5 * sq + alpha * l1)
}

/// Largest violation of the subgradient optimality conditions: for
/// nonzero weights `|∇CE + λ(1-α)w + λα sign(w)|`, for zero weights
/// `max(|∇CE| - λα, 0)`, and `|∂/∂b|` for the bias.
pub fn optimality_residual(head: &SparseHead, activations: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let (_, r) = residuals(activations, labels, &head.weights, &head.bias);
    let g = r.t().dot(&activations);
    let gb = r.sum_axis(Axis(0));
    let (l1, l2) = (head.lambda * head.alpha, head.lambda * (1.0 - head.alpha));
    let mut worst = gb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Zip::from(&g).and(&head.weights).for_each(|&gi, &w| {
        let v = if w != 0.0 {
            (gi + l2 * w + l1 * w.signum()).abs()
        } else {
            (gi.abs() - l1).max(0.0)
        };
        worst = worst.max(v);
    });
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once the optimality residual falls below this.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub objective: f64,
    pub residual: f64,
    pub converged: bool,
}

/// Largest singular value squared of `[A 1]`, by power iteration.
fn spectral_bound(activations: ArrayView2<f64>) -> f64 {
    let (n, m) = activations.dim();
    let mut gram = Array2::<f64>::zeros((m + 1, m + 1));
    gram.slice_mut(ndarray::s![..m, ..m]).assign(&activations.t().dot(&activations));
    let colsum = activations.sum_axis(Axis(0));
    for j in 0..m {
        gram[[j, m]] = colsum[j];
        gram[[m, j]] = colsum[j];
    }
    gram[[m, m]] = n as f64;
    let mut v = Array1::from_elem(m + 1, 1.0 / ((m + 1) as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..100 {
        let w = gram.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        v = w / norm;
        if (norm - est).abs() <= 1e-9 * norm {
            est = norm;
            break;
        }
        est = norm;
    }
    est
}

/// Bias that is optimal when `W = 0`: log class frequencies.
fn prior_bias(labels: &[usize], classes: usize) -> Array1<f64> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len().max(1) as f64;
    Array1::from_iter(counts.iter().map(|&c| ((c.max(1)) as f64 / n).ln()))
}

/// `λ_max = max |∇_W CE(0, b*)| / α`, the smallest penalty with `W = 0`.
pub fn lambda_max(activations: ArrayView2<f64>, labels: &[usize], classes: usize, alpha: f64) -> Result<f64, HeadError> {
    check_data(activations, labels, classes)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(HeadError::Param(format!("alpha {alpha} must lie in (0, 1] for a path")));
    }
    let w = Array2::zeros((classes, activations.ncols()));
    let (_, r) = residuals(activations, labels, &w, &prior_bias(labels, classes));
    let g = r.t().dot(&activations);
    Ok(g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / alpha)
}

/// Minimizes the elastic-net objective at a single `λ`. A warm start is
/// used when given.
pub fn fit_head(
    activations: ArrayView2<f64>,
    labels: &[usize],
    class_names: &[String],
    alpha: f64,
    lambda: f64,
    options: &FitOptions,
    warm: Option<&SparseHead>,
) -> Result<(SparseHead, FitInfo), HeadError> {
    let classes = class_names.len();
    check_data(activations, labels, classes)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HeadError::Param(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(HeadError::Param(format!("lambda {lambda} must be finite and non-negative")));
    }
    let m = activations.ncols();
    let (l1, l2) = (lambda * alpha, lambda * (1.0 - alpha));

    let (mut w, mut b) = match warm {
        Some(h) if h.weights.dim() == (classes, m) => (h.weights.clone(), h.bias.clone()),
        _ => (Array2::zeros((classes, m)), prior_bias(labels, classes)),
    };

    let smooth = |w: &Array2<f64>, b: &Array1<f64>| -> (f64, Array2<f64>, Array1<f64>) {
        let (ce, r) = residuals(activations, labels, w, b);
        let mut gw = r.t().dot(&activations);
        if l2 > 0.0 {
            gw.scaled_add(l2, w);
        }
        let gb = r.sum_axis(Axis(0));
        let sq: f64 = if l2 > 0.0 { w.iter().map(|v| v * v).sum() } else { 0.0 };
        (ce + 0.5 * l2 * sq, gw, gb)
    };
    let l1_norm = |w: &Array2<f64>| w.iter().map(|v| v.abs()).sum::<f64>();

    // softmax Hessian is bounded by 1/2 times the Gram matrix of [A 1]
    let lipschitz_bound = 0.5 * spectral_bound(activations) + l2;
    let mut lip = (lipschitz_bound * 0.05).max(1e-12);

    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t = 1.0f64;
    let mut info = FitInfo {
        iterations: 0,
        objective: f64::NAN,
        residual: f64::INFINITY,
        converged: false,
    };
    let mut fx = smooth(&w, &b).0 + l1 * l1_norm(&w);

    for iter in 1..=options.max_iter {
        info.iterations = iter;
        let (fy, gyw, gyb) = smooth(&yw, &yb);
        if !fy.is_finite() {
            return Err(HeadError::Divergence(iter));
        }
        let (zw, zb, fz) = loop {
            let step = 1.0 / lip;
            let zw = Zip::from(&yw).and(&gyw).map_collect(|&y, &g| prox_l1(y - step * g, step * l1));
            let zb = &yb - &(&gyb * step);
            let fz = smooth(&zw, &zb).0;
            let dw = &zw - &yw;
            let db = &zb - &yb;
            let lin = (&gyw * &dw).sum() + gyb.dot(&db);
            let quad = 0.5 * lip * ((&dw * &dw).sum() + db.dot(&db));
            if fz <= fy + lin + quad + 1e-12 * fy.abs().max(1.0) || lip >= lipschitz_bound * 4.0 {
                break (zw, zb, fz);
            }
            lip *= 2.0;
        };
        let fz_total = fz + l1 * l1_norm(&zw);
        if !fz_total.is_finite() {
            return Err(HeadError::Divergence(iter));
        }

        // restart momentum when the step goes uphill
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        if fz_total > fx && t > 1.0 {
            t = 1.0;
            yw = w.clone();
            yb = b.clone();
            lip = (lip * 0.9).max(1e-12);
            continue;
        }
        let beta = (t - 1.0) / t_next;
        yw = &zw + &((&zw - &w) * beta);
        yb = &zb + &((&zb - &b) * beta);
        t = t_next;
        w = zw;
        b = zb;
        fx = fz_total;
        lip = (lip * 0.95).max(1e-12);

        if iter % 10 == 0 || iter == options.max_iter {
            let head = SparseHead::new(w.clone(), b.clone(), class_names.to_vec(), lambda, alpha);
            let res = optimality_residual(&head, activations, labels);
            info.residual = res;
            if res <= options.tol {
                info.converged = true;
                break;
            }
        }
    }
    let head = SparseHead::new(w, b, class_names.to_vec(), lambda, alpha);
    info.objective = elastic_net_objective(&head, activations, labels)?;
    info.residual = optimality_residual(&head, activations, labels);
    info.converged = info.residual <= options.tol;
    Ok((head, info))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub lambda: f64,
    pub mean_nnz: f64,
    pub min_nnz: usize,
    pub max_nnz: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub alpha: f64,
    pub requested_band: (f64, f64),
    /// Band the selection was made in: the requested one, or the fallback
    /// when no path point reached the requested band.
    pub band: (f64, f64),
    pub steps: Vec<PathStep>,
    pub chosen: usize,
    /// False when no path point landed inside the used band and the
    /// nearest one was taken instead.
    pub in_band: bool,
    /// True when the chosen head has no nonzero weights.
    pub degenerate: bool,
    pub chosen_nnz_per_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub alpha: f64,
    pub band: (f64, f64),
    /// Tried when no path point reaches `band`.
    pub fallback_band: Option<(f64, f64)>,
    pub steps: usize,
    /// `λ_min = ratio · λ_max`.
    pub min_ratio: f64,
    pub fit: FitOptions,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            band: (25.0, 35.0),
            fallback_band: None,
            steps: 50,
            min_ratio: 1e-4,
            fit: FitOptions::default(),
        }
    }
}

/// Geometric sequence from `λ_max` down to `ratio · λ_max`.
pub fn lambda_grid(lambda_max: f64, steps: usize, ratio: f64) -> Vec<f64> {
    if steps <= 1 {
        return vec![lambda_max];
    }
    let q = ratio.powf(1.0 / (steps - 1) as f64);
    (0..steps).map(|k| lambda_max * q.powi(k as i32)).collect()
}

fn band_distance(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

/// Fits the warm-started regularization path and selects the largest `λ`
/// whose mean nonzeros per class falls in `config.band`.
pub fn fit_path(
    train: ArrayView2<f64>,
    train_labels: &[usize],
    val: ArrayView2<f64>,
    val_labels: &[usize],
    class_names: &[String],
    config: &PathConfig,
) -> Result<(SparseHead, PathReport), HeadError> {
    for (lo, hi) in std::iter::once(config.band).chain(config.fallback_band) {
        if !(lo <= hi) {
            return Err(HeadError::Param(format!("nnz band [{lo}, {hi}] is empty")));
        }
    }
    check_data(val, val_labels, class_names.len())?;
    let lmax = lambda_max(train, train_labels, class_names.len(), config.alpha)?;
    let grid = lambda_grid(lmax, config.steps, config.min_ratio);
    let n = train.nrows().max(1) as f64;

    let mut heads = Vec::with_capacity(grid.len());
    let mut steps = Vec::with_capacity(grid.len());
    let mut warm: Option<SparseHead> = None;
    for &lambda in &grid {
        let (head, info) = fit_head(train, train_labels, class_names, config.alpha, lambda, &config.fit, warm.as_ref())?;
        let (ce, _) = residuals(train, train_labels, &head.weights, &head.bias);
        steps.push(PathStep {
            lambda,
            mean_nnz: head.mean_nnz(),
            min_nnz: head.nnz_per_class.iter().copied().min().unwrap_or(0),
            max_nnz: head.nnz_per_class.iter().copied().max().unwrap_or(0),
            train_loss: ce / n,
            train_accuracy: head.accuracy(train, train_labels),
            val_accuracy: head.accuracy(val, val_labels),
            iterations: info.iterations,
            residual: info.residual,
        });
        warm = Some(head.clone());
        heads.push(head);
    }

    let first_in = |(lo, hi): (f64, f64)| steps.iter().position(|s| s.mean_nnz >= lo && s.mean_nnz <= hi);
    let mut band = config.band;
    let mut in_band = first_in(band);
    if let (None, Some(fallback)) = (in_band, config.fallback_band) {
        band = fallback;
        in_band = first_in(band);
    }
    let chosen = in_band.unwrap_or_else(|| {
        let mut best = 0;
        for (i, s) in steps.iter().enumerate() {
            if band_distance(s.mean_nnz, band) < band_distance(steps[best].mean_nnz, band) {
                best = i;
            }
        }
        best
    });
    let head = heads.swap_remove(chosen);
    let report = PathReport {
        alpha: config.alpha,
        requested_band: config.band,
        band,
        chosen,
        in_band: in_band.is_some(),
        degenerate: head.nnz_per_class.iter().all(|&c| c == 0),
        chosen_nnz_per_class: head.nnz_per_class.clone(),
        steps,
    };
    Ok((head, report))
}

/// Dense ablation: unpenalized fit (`λ = 0`).
pub fn fit_dense(
    activations: ArrayView2<f64>,
    labels: &[usize],
    class_names: &[String],
    options: &FitOptions,
) -> Result<(SparseHead, FitInfo), HeadError> {
    fit_head(activations, labels, class_names, 0.0, 0.0, options, None)
}

/// Helper for callers holding plain slices.
pub fn predict(head: &SparseHead, activations: ArrayView1<f64>) -> Result<(Vec<f64>, usize), HeadError> {
    head.predict(&activations.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prox_closed_forms() {
        assert_eq!(prox_l1(2.0, 0.5), 1.5);
        assert_eq!(prox_l1(-0.3, 0.5), 0.0);
        assert_eq!(prox_l1(-2.0, 0.5), -1.5);
        assert_eq!(prox_l1(0.7, 0.0), 0.7);
    }

    proptest! {
        #[test]
        fn prox_is_non_expansive(a in -10.0f64..10.0, b in -10.0f64..10.0, t in 0.0f64..5.0) {
            prop_assert!((prox_l1(a, t) - prox_l1(b, t)).abs() <= (a - b).abs() + 1e-15);
        }
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn zero_head_objective_is_n_log_classes() {
        let a = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let labels = vec![0, 1, 2, 3, 0, 1, 2];
        let head = SparseHead::new(Array2::zeros((4, 3)), Array1::zeros(4), names(4), 2.0, 0.5);
        let obj = elastic_net_objective(&head, a.view(), &labels).unwrap();
        assert!((obj - 7.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let a = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let labels = vec![0, 1, 1, 0];
        let w = Array2::from_shape_vec((2, 2), vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let b = Array1::from(vec![0.05, -0.05]);
        let head = SparseHead::new(w.clone(), b.clone(), names(2), 0.0, 0.99);
        let mut ce = 0.0;
        for i in 0..4 {
            let z: Vec<f64> = (0..2).map(|k| w.row(k).dot(&a.row(i)) + b[k]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - z[labels[i]];
        }
        assert!((elastic_net_objective(&head, a.view(), &labels).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn predict_ties_and_selector_rows() {
        let head = SparseHead::new(Array2::zeros((3, 2)), Array1::from(vec![0.5, 2.0, 2.0]), names(3), 0.0, 0.0);
        let (_, c) = head.predict(&[1.0, -1.0]).unwrap();
        assert_eq!(c, 1);
        let w = Array2::from_shape_vec((2, 3), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let head = SparseHead::new(w, Array1::from(vec![0.25, 0.0]), names(2), 0.0, 0.0);
        let (logits, _) = head.predict(&[9.0, -1.5, 4.0]).unwrap();
        assert_eq!(logits[0], -1.5 + 0.25);
        assert!(head.predict(&[1.0]).is_err());
    }

    #[test]
    fn large_lambda_shrinks_to_zero() {
        let a = Array2::from_shape_fn((30, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let lmax = lambda_max(a.view(), &labels, 3, 0.99).unwrap();
        let (head, _) = fit_head(a.view(), &labels, &names(3), 0.99, lmax * 1.01, &FitOptions::default(), None).unwrap();
        assert!(head.weights.iter().all(|&v| v == 0.0));
        let (head, _) = fit_head(a.view(), &labels, &names(3), 0.99, lmax * 0.5, &FitOptions::default(), None).unwrap();
        assert!(head.weights.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unregularized_fit_separates_two_classes() {
        let a = Array2::from_shape_fn((20, 2), |(i, j)| {
            let s = if i < 10 { 1.0 } else { -1.0 };
            s * (1.0 + (i % 5) as f64 * 0.1) + j as f64 * 0.3
        });
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let (head, _) = fit_dense(a.view(), &labels, &names(2), &FitOptions { max_iter: 2000, tol: 1e-6 }).unwrap();
        assert_eq!(head.accuracy(a.view(), &labels), 1.0);
    }

    #[test]
    fn grid_is_strictly_decreasing() {
        let g = lambda_grid(3.0, 50, 1e-4);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 3.0);
        assert!((g[49] / 3.0 - 1e-4).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_parameters() {
        let a = Array2::zeros((3, 2));
        let labels = vec![0, 1, 0];
        assert!(fit_head(a.view(), &labels, &names(2), 1.5, 0.1, &FitOptions::default(), None).is_err());
        assert!(fit_head(a.view(), &labels, &names(2), 0.5, -0.1, &FitOptions::default(), None).is_err());
        assert!(fit_head(a.view(), &[0, 5, 0], &names(2), 0.5, 0.1, &FitOptions::default(), None).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let w = Array2::from_shape_vec((2, 3), vec![0.5, 0.0, -1.25, 0.0, 0.0, 2.0]).unwrap();
        let head = SparseHead::new(w, Array1::from(vec![0.1f32 as f64, -0.2f32 as f64]), names(2), 0.3, 0.99);
        let dir = tempfile::tempdir().unwrap();
        head.save(dir.path()).unwrap();
        let back = SparseHead::load(dir.path()).unwrap();
        assert_eq!(back, head);
        assert_eq!(back.nnz_per_class, vec![2, 1]);
    }
}
