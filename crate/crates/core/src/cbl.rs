//! Concept bottleneck layer: learns a projection `W_c` from backbone
//! features to concept space so that each output neuron's activation
//! pattern matches its concept's image-text activation column under the
//! cos-cubed similarity.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::Adam;
use crate::concepts::{ConceptSet, FilterId, RemovalReason};
use crate::manifest::{read_lines, write_lines, BundleError, DatasetBundle};
use crate::npy::{self, NpyError};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CblError {
    #[error("similarity undefined for a constant activation vector")]
    ConstantVector,
    #[error("activation of concept {concept} is constant; similarity undefined")]
    ConstantActivation { concept: usize },
    #[error("cos-cubed needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no concepts to train")]
    NoConcepts,
    #[error("every concept fell below fidelity cutoff {cutoff}")]
    AllConceptsDropped { cutoff: f64 },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Standardized (mean 0, population std 1) copy of `v`, or `None` if `v`
/// is constant.
fn standardize(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let centered = v.mapv(|x| x - mean);
    let std = (centered.mapv(|x| x * x).sum() / n).sqrt();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(std > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return None;
    }
    Some(centered / std)
}

/// Unit-norm cube of the standardized vector: the fixed side of every
/// cos-cubed comparison.
fn cubed_unit(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let z = standardize(v)?;
    let c = z.mapv(|x| x * x * x);
    let norm = c.dot(&c).sqrt();
    (norm > 0.0).then(|| c / norm)
}

/// Cosine similarity between the element-wise cubes of the standardized
/// vectors.
pub fn cos_cubed(q: &[f64], p: &[f64]) -> Result<f64, CblError> {
    if q.len() != p.len() {
        return Err(CblError::Dimension(format!("{} vs {}", q.len(), p.len())));
    }
    if q.len() < 2 {
        return Err(CblError::TooFewSamples(q.len()));
    }
    let a = cubed_unit(ArrayView1::from(q)).ok_or(CblError::ConstantVector)?;
    let b = cubed_unit(ArrayView1::from(p)).ok_or(CblError::ConstantVector)?;
    Ok(a.dot(&b).clamp(-1.0, 1.0))
}

/// Per-column cubed-unit targets for a block of activation rows.
struct Targets {
    cols: Vec<Option<Array1<f64>>>,
}

impl Targets {
    fn new(p: ArrayView2<f64>) -> Self {
        Self {
            cols: p.axis_iter(Axis(1)).map(cubed_unit).collect(),
        }
    }
}

/// Similarity and its gradient with respect to `q` for one concept.
fn sim_and_grad(q: ArrayView1<f64>, target: &Array1<f64>) -> Option<(f64, Array1<f64>)> {
    let n = q.len() as f64;
    let mean = q.sum() / n;
    let centered = q.mapv(|x| x - mean);
    let std = (centered.mapv(|x| x * x).sum() / n).sqrt();
    let scale = q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(std > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return None;
    }
    let z = centered / std;
    let a = z.mapv(|x| x * x * x);
    let na = a.dot(&a).sqrt();
    let sim = a.dot(target) / na;
    // d sim / d a, then through the cube; the similarity is scale invariant
    // in q so the standardization contributes only the 1/std factor and
    // the final centering projection.
    let g_a = (target - &(&a * (sim / na))) / na;
    let g_z = &g_a * &z.mapv(|x| 3.0 * x * x);
    let g_centered = g_z / std;
    let gm = g_centered.sum() / n;
    Some((sim, g_centered.mapv(|g| g - gm)))
}

/// Per-concept similarities of the projected activations `X W_cᵀ`.
fn similarities(w: &Array2<f64>, x: ArrayView2<f64>, targets: &Targets) -> Vec<Option<f64>> {
    let q = x.dot(&w.t());
    (0..w.nrows())
        .into_par_iter()
        .map(|j| {
            let t = targets.cols[j].as_ref()?;
            let a = cubed_unit(q.column(j))?;
            Some(a.dot(t).clamp(-1.0, 1.0))
        })
        .collect()
}

fn check_shapes(w: &Array2<f64>, x: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<(), CblError> {
    if w.ncols() != x.ncols() {
        return Err(CblError::Dimension(format!(
            "W_c has {} columns, features have {}",
            w.ncols(),
            x.ncols()
        )));
    }
    if x.nrows() != p.nrows() || p.ncols() != w.nrows() {
        return Err(CblError::Dimension(format!(
            "features {}x{}, activations {}x{}, W_c {}x{}",
            x.nrows(),
            x.ncols(),
            p.nrows(),
            p.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    if x.nrows() < 2 {
        return Err(CblError::TooFewSamples(x.nrows()));
    }
    Ok(())
}

/// Negative sum over concepts of the cos-cubed similarity between each
/// projected neuron and its activation column.
pub fn cbl_loss(w: &Array2<f64>, features: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<f64, CblError> {
    check_shapes(w, features, p)?;
    let targets = Targets::new(p);
    if let Some(j) = targets.cols.iter().position(Option::is_none) {
        return Err(CblError::ConstantActivation { concept: j });
    }
    let sims = similarities(w, features, &targets);
    let mut loss = 0.0;
    for (j, s) in sims.into_iter().enumerate() {
        loss -= s.ok_or(CblError::ConstantActivation { concept: j })?;
    }
    Ok(loss)
}

/// Loss and analytic gradient with respect to `W_c` (shape M×d0).
pub fn cbl_loss_grad(
    w: &Array2<f64>,
    features: ArrayView2<f64>,
    p: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>), CblError> {
    check_shapes(w, features, p)?;
    let targets = Targets::new(p);
    if let Some(j) = targets.cols.iter().position(Option::is_none) {
        return Err(CblError::ConstantActivation { concept: j });
    }
    let (loss, grad) = loss_grad_lenient(w, features, &targets);
    match loss {
        Some(l) => Ok((l, grad)),
        None => {
            let q = features.dot(&w.t());
            let j = (0..w.nrows())
                .find(|&j| standardize(q.column(j)).is_none())
                .unwrap_or(0);
            Err(CblError::ConstantActivation { concept: j })
        }
    }
}

/// Skips concepts whose target or activation is constant (zero gradient);
/// returns `None` for the loss if any concept was skipped.
fn loss_grad_lenient(w: &Array2<f64>, x: ArrayView2<f64>, targets: &Targets) -> (Option<f64>, Array2<f64>) {
    let q = x.dot(&w.t());
    let cols: Vec<Option<(f64, Array1<f64>)>> = (0..w.nrows())
        .into_par_iter()
        .map(|j| sim_and_grad(q.column(j), targets.cols[j].as_ref()?))
        .collect();
    let mut g_q = Array2::<f64>::zeros(q.raw_dim());
    let mut loss = Some(0.0);
    for (j, c) in cols.into_iter().enumerate() {
        match c {
            Some((s, g)) => {
                loss = loss.map(|l| l - s);
                g_q.column_mut(j).assign(&g);
            }
            None => loss = None,
        }
    }
    // d(-sim)/dW = -(dq)ᵀ X
    let grad = -g_q.t().dot(&x);
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CblTrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// trains for `max_epochs`.
    pub patience: Option<usize>,
    pub fidelity_cutoff: f64,
    pub seed: u64,
}

impl Default for CblTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 512,
            max_epochs: 1000,
            patience: Some(3),
            fidelity_cutoff: 0.45,
            seed: 0,
        }
    }
}

impl CblTrainConfig {
    pub fn validate(&self) -> Result<(), CblError> {
        if !(self.fidelity_cutoff > 0.0 && self.fidelity_cutoff < 1.0) {
            return Err(CblError::Config(format!(
                "fidelity cutoff {} outside (0, 1)",
                self.fidelity_cutoff
            )));
        }
        if self.patience == Some(0) {
            return Err(CblError::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CblError::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CblError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedConcept {
    pub name: String,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: CblTrainConfig,
    pub initial_concepts: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_similarity: f64,
    pub history: Vec<EpochRecord>,
    /// Concepts removed by the fidelity filter (Δ of them).
    pub dropped: Vec<DroppedConcept>,
    pub retained: usize,
}

/// Trained projection plus the per-concept statistics used to standardize
/// its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CblModel {
    pub w_c: Tensor,
    pub concept_names: Vec<String>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub val_fidelity: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FidelityFile {
    concepts: Vec<DroppedConcept>,
}

/// Validation similarity of each concept; a constant neuron scores 0.
fn fidelities(w: &Array2<f64>, x: ArrayView2<f64>, targets: &Targets) -> Vec<f64> {
    similarities(w, x, targets)
        .into_iter()
        .map(|s| s.unwrap_or(0.0))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn round_f32(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v as f32 as f64)
}

/// Trains the bottleneck on the kept concepts of `concepts`, whose entries
/// align with the bundle's activation columns, then drops every concept
/// whose validation fidelity is below the cutoff.
pub fn train_cbl(
    bundle: &DatasetBundle,
    concepts: &ConceptSet,
    config: &CblTrainConfig,
) -> Result<(CblModel, TrainReport), CblError> {
    config.validate()?;
    if concepts.len() != bundle.train_p.cols() {
        return Err(CblError::Dimension(format!(
            "concept set has {} entries, activation matrix {} columns",
            concepts.len(),
            bundle.train_p.cols()
        )));
    }
    let kept = concepts.kept_indices();
    if kept.is_empty() {
        return Err(CblError::NoConcepts);
    }
    let names: Vec<String> = kept.iter().map(|&i| concepts.entries()[i].text.clone()).collect();
    let x_train = bundle.train_features.to_array();
    let x_val = bundle.val_features.to_array();
    let p_train = bundle.train_p.select_columns(&kept).to_array();
    let p_val = bundle.val_p.select_columns(&kept).to_array();
    let (n, d0) = x_train.dim();
    let m = kept.len();
    if n < 2 || x_val.nrows() < 2 {
        return Err(CblError::TooFewSamples(n.min(x_val.nrows())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1.0 / (d0 as f64).sqrt()).expect("valid std");
    let mut w = Array2::from_shape_fn((m, d0), |_| init.sample(&mut rng));
    let mut opt = Adam::new((m, d0), config.learning_rate, config.beta1, config.beta2);
    let val_targets = Targets::new(p_val.view());

    let mut order: Vec<usize> = (0..n).collect();
    let batch = config.batch_size.min(n);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, w.clone());
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = x_train.select(Axis(0), chunk);
            let pb = p_train.select(Axis(0), chunk);
            let targets = Targets::new(pb.view());
            let (loss, grad) = loss_grad_lenient(&w, xb.view(), &targets);
            if let Some(l) = loss {
                if !l.is_finite() {
                    return Err(CblError::Divergence { epoch });
                }
                epoch_loss += l;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CblError::Divergence { epoch });
            }
            opt.step(&mut w, &grad);
            batches += 1;
        }
        let val = mean(&fidelities(&w, x_val.view(), &val_targets));
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_similarity: val,
        });
        if val > best.0 {
            best = (val, epoch, w.clone());
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }

    let (best_val, best_epoch, best_w) = best;
    let w = round_f32(&best_w);
    let fid = fidelities(&w, x_val.view(), &val_targets);

    let mut keep_rows = Vec::new();
    let mut dropped = Vec::new();
    for (j, &f) in fid.iter().enumerate() {
        if f < config.fidelity_cutoff {
            dropped.push(DroppedConcept {
                name: names[j].clone(),
                fidelity: f,
            });
        } else {
            keep_rows.push(j);
        }
    }
    if keep_rows.is_empty() {
        return Err(CblError::AllConceptsDropped {
            cutoff: config.fidelity_cutoff,
        });
    }
    let w = w.select(Axis(0), &keep_rows);
    let raw = x_train.dot(&w.t());
    let nf = n as f64;
    let mut means = Vec::with_capacity(keep_rows.len());
    let mut stds = Vec::with_capacity(keep_rows.len());
    for col in raw.axis_iter(Axis(1)) {
        let mu = col.sum() / nf;
        let var = col.mapv(|v| (v - mu) * (v - mu)).sum() / nf;
        means.push(mu as f32);
        stds.push(var.sqrt().max(STD_FLOOR) as f32);
    }

    let model = CblModel {
        w_c: Tensor::from_array(&w)?,
        concept_names: keep_rows.iter().map(|&j| names[j].clone()).collect(),
        mean: means,
        std: stds,
        val_fidelity: keep_rows.iter().map(|&j| fid[j]).collect(),
    };
    let report = TrainReport {
        config: config.clone(),
        initial_concepts: m,
        epochs_run: history.len(),
        best_epoch,
        best_val_similarity: best_val,
        history,
        retained: model.num_concepts(),
        dropped,
    };
    Ok((model, report))
}

/// Applies the fidelity drops of a training report to a concept set, so
/// the audit trail covers all five filters.
pub fn mark_fidelity_drops(set: &mut ConceptSet, report: &TrainReport) {
    for d in &report.dropped {
        if let Some(i) = set
            .kept_indices()
            .into_iter()
            .find(|&i| set.entries()[i].text == d.name)
        {
            set.remove(
                i,
                FilterId::Fidelity,
                RemovalReason::LowFidelity {
                    fidelity: d.fidelity,
                    cutoff: report.config.fidelity_cutoff,
                },
            );
        }
    }
}

impl CblModel {
    pub fn num_concepts(&self) -> usize {
        self.w_c.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_c.cols()
    }

    /// Standardized concept activations `(W_c f - mean) / std` of one row.
    pub fn project(&self, feature_row: &[f32]) -> Result<Vec<f64>, CblError> {
        if feature_row.len() != self.feature_dim() {
            return Err(CblError::Dimension(format!(
                "feature row has {} entries, model expects {}",
                feature_row.len(),
                self.feature_dim()
            )));
        }
        Ok((0..self.num_concepts())
            .map(|j| {
                let raw: f64 = self
                    .w_c
                    .row(j)
                    .iter()
                    .zip(feature_row)
                    .map(|(&w, &f)| w as f64 * f as f64)
                    .sum();
                (raw - self.mean[j] as f64) / self.std[j] as f64
            })
            .collect())
    }

    /// Projects every row of a feature matrix.
    pub fn project_all(&self, features: &Tensor) -> Result<Array2<f64>, CblError> {
        let mut out = Array2::zeros((features.rows(), self.num_concepts()));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let v = self.project(features.row(i))?;
            row.assign(&Array1::from(v));
        }
        Ok(out)
    }

    /// Drops the fidelity-filtered concepts from a bundle restricted to the
    /// concepts the model was trained on.
    pub fn retained_indices(&self, trained_names: &[String]) -> Vec<usize> {
        self.concept_names
            .iter()
            .filter_map(|n| trained_names.iter().position(|t| t == n))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CblError> {
        fs::create_dir_all(dir)?;
        npy::write_tensor(&self.w_c, dir.join("W_c.npy"))?;
        let m = self.num_concepts();
        let mut stats = self.mean.clone();
        stats.extend_from_slice(&self.std);
        npy::write_tensor(&Tensor::new(2, m, stats)?, dir.join("stats.npy"))?;
        write_lines(&dir.join("concepts.txt"), &self.concept_names)?;
        let fid = FidelityFile {
            concepts: self
                .concept_names
                .iter()
                .zip(&self.val_fidelity)
                .map(|(n, &f)| DroppedConcept {
                    name: n.clone(),
                    fidelity: f,
                })
                .collect(),
        };
        fs::write(dir.join("fidelity.json"), serde_json::to_string_pretty(&fid)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CblError> {
        let w_c = npy::read_tensor(dir.join("W_c.npy"))?;
        let stats = npy::read_tensor(dir.join("stats.npy"))?;
        let names = read_lines(&dir.join("concepts.txt"))?;
        let fid: FidelityFile = serde_json::from_str(&fs::read_to_string(dir.join("fidelity.json"))?)?;
        let m = w_c.rows();
        if stats.shape() != (2, m) || names.len() != m || fid.concepts.len() != m {
            return Err(CblError::Dimension(format!(
                "inconsistent model files: W_c {}x{}, stats {:?}, {} names, {} fidelities",
                m,
                w_c.cols(),
                stats.shape(),
                names.len(),
                fid.concepts.len()
            )));
        }
        Ok(Self {
            mean: stats.row(0).to_vec(),
            std: stats.row(1).to_vec(),
            w_c,
            concept_names: names,
            val_fidelity: fid.concepts.iter().map(|c| c.fidelity).collect(),
        })
    }
}
