//! End-to-end training: filters 1-4, bottleneck training with filter 5,
//! the sparse head's regularization path, and evaluation. Every artifact
//! is written only after all stages succeed.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbl::{mark_fidelity_drops, train_cbl, CblError, CblModel, CblTrainConfig, DroppedConcept, TrainReport};
use crate::concepts::{run_filter_pipeline, ConceptSet, FilterConfig, FilterError, FilterId, FilterReport};
use crate::head::{fit_path, HeadError, PathConfig, PathReport, SparseHead};
use crate::manifest::{load_bundle, BundleError, DatasetBundle};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage 0 (load): {0}")]
    Load(#[from] BundleError),
    #[error("stage 1 (filter): {0}")]
    Filter(#[from] FilterError),
    #[error("stage 2 (train-cbl): {0}")]
    Cbl(#[from] CblError),
    #[error("stage 3 (train-final): {0}")]
    Head(#[from] HeadError),
    #[error("stage 4 (write): {0}")]
    Write(#[from] std::io::Error),
    #[error("stage 4 (write): {0}")]
    Json(#[from] serde_json::Error),
    #[error("model directory {dir}: {detail}")]
    Model { dir: String, detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub cbl: CblTrainConfig,
    pub path: PathConfig,
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub format_version: u32,
    pub dataset: String,
    /// Manifest the model was trained from.
    pub manifest: String,
    pub concepts: usize,
    pub classes: Vec<String>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub dataset: String,
    pub filter: FilterReport,
    pub fidelity_dropped: Vec<DroppedConcept>,
    pub final_concepts: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub requested_band: (f64, f64),
    pub band: (f64, f64),
    pub in_band: bool,
    pub degenerate: bool,
    pub mean_nnz: f64,
    pub nnz_per_class: Vec<usize>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub cbl_epochs: usize,
    pub cbl_best_epoch: usize,
}

/// Every in-memory product of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub concepts: ConceptSet,
    pub filter_report: FilterReport,
    pub cbl: CblModel,
    pub train_report: TrainReport,
    pub head: SparseHead,
    pub path_report: PathReport,
    pub report: PipelineReport,
    pub train_activations: Array2<f64>,
    pub val_activations: Array2<f64>,
}

/// Filters 1-4.
pub fn filter_stage(bundle: &DatasetBundle, config: &FilterConfig) -> Result<(ConceptSet, FilterReport), PipelineError> {
    Ok(run_filter_pipeline(&bundle.concepts, bundle, config)?)
}

/// Trains the bottleneck on the kept concepts and records filter 5.
pub fn cbl_stage(
    bundle: &DatasetBundle,
    concepts: &mut ConceptSet,
    filter_report: &mut FilterReport,
    config: &CblTrainConfig,
) -> Result<(CblModel, TrainReport), PipelineError> {
    let (model, report) = train_cbl(bundle, concepts, config)?;
    let before = concepts.clone();
    mark_fidelity_drops(concepts, &report);
    filter_report.record(FilterId::Fidelity, &before, concepts);
    Ok((model, report))
}

/// Projects both splits and fits the regularization path. The chosen head
/// is rounded to the precision it is stored at.
pub fn head_stage(
    bundle: &DatasetBundle,
    model: &CblModel,
    config: &PathConfig,
) -> Result<(SparseHead, PathReport, Array2<f64>, Array2<f64>), PipelineError> {
    let train = model.project_all(&bundle.train_features)?;
    let val = model.project_all(&bundle.val_features)?;
    let (head, report) = fit_path(
        train.view(),
        &bundle.train_labels,
        val.view(),
        &bundle.val_labels,
        &bundle.class_names,
        config,
    )?;
    Ok((head.quantized(), report, train, val))
}

/// Runs every stage in memory.
pub fn train(bundle: &DatasetBundle, config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let (mut concepts, mut filter_report) = filter_stage(bundle, &config.filter)?;
    let (cbl, train_report) = cbl_stage(bundle, &mut concepts, &mut filter_report, &config.cbl)?;
    let (head, path_report, train_acts, val_acts) = head_stage(bundle, &cbl, &config.path)?;
    let report = PipelineReport {
        dataset: bundle.name.clone(),
        fidelity_dropped: train_report.dropped.clone(),
        final_concepts: cbl.num_concepts(),
        lambda: head.lambda,
        alpha: head.alpha,
        requested_band: path_report.requested_band,
        band: path_report.band,
        in_band: path_report.in_band,
        degenerate: path_report.degenerate,
        mean_nnz: head.mean_nnz(),
        nnz_per_class: head.nnz_per_class.clone(),
        train_accuracy: head.accuracy(train_acts.view(), &bundle.train_labels),
        val_accuracy: head.accuracy(val_acts.view(), &bundle.val_labels),
        cbl_epochs: train_report.epochs_run,
        cbl_best_epoch: train_report.best_epoch,
        filter: filter_report.clone(),
    };
    Ok(PipelineOutput {
        concepts,
        filter_report,
        cbl,
        train_report,
        head,
        path_report,
        report,
        train_activations: train_acts,
        val_activations: val_acts,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes a model directory for an already trained pipeline.
pub fn write_model(
    out: &Path,
    manifest: &Path,
    bundle: &DatasetBundle,
    config: &PipelineConfig,
    run: &PipelineOutput,
) -> Result<(), PipelineError> {
    fs::create_dir_all(out)?;
    run.cbl.save(&out.join("cbl"))?;
    run.head.save(&out.join("head"))?;
    let info = ModelInfo {
        format_version: MODEL_FORMAT_VERSION,
        dataset: bundle.name.clone(),
        manifest: manifest.display().to_string(),
        concepts: run.cbl.num_concepts(),
        classes: bundle.class_names.clone(),
        config: config.clone(),
    };
    write_json(&out.join("model.json"), &info)?;
    write_json(&out.join("concept_set.json"), &run.concepts)?;
    write_json(&out.join("filter_report.json"), &run.filter_report)?;
    write_json(&out.join("train_report.json"), &run.train_report)?;
    write_json(&out.join("path_report.json"), &run.path_report)?;
    write_json(&out.join("report.json"), &run.report)?;
    Ok(())
}

/// Loads the manifest, trains, and writes the model directory `out`.
pub fn run_pipeline(
    manifest: impl AsRef<Path>,
    out: impl AsRef<Path>,
    config: &PipelineConfig,
) -> Result<PipelineReport, PipelineError> {
    let manifest = manifest.as_ref();
    let bundle = load_bundle(manifest)?;
    let run = train(&bundle, config)?;
    let manifest = fs::canonicalize(manifest)?;
    write_model(out.as_ref(), &manifest, &bundle, config, &run)?;
    Ok(run.report)
}

/// A trained model directory.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub dir: PathBuf,
    pub info: ModelInfo,
    pub cbl: CblModel,
    pub head: SparseHead,
}

impl LoadedModel {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let bad = |detail: String| PipelineError::Model {
            dir: dir.display().to_string(),
            detail,
        };
        let text = fs::read_to_string(dir.join("model.json")).map_err(|e| bad(format!("model.json: {e}")))?;
        let info: ModelInfo = serde_json::from_str(&text).map_err(|e| bad(format!("model.json: {e}")))?;
        if info.format_version != MODEL_FORMAT_VERSION {
            return Err(bad(format!("unsupported model format {}", info.format_version)));
        }
        let cbl = CblModel::load(&dir.join("cbl"))?;
        let head = SparseHead::load(&dir.join("head"))?;
        if head.num_concepts() != cbl.num_concepts() || head.class_names != info.classes {
            return Err(bad(format!(
                "head has {} concepts and {} classes, bottleneck {} concepts, model.json {} classes",
                head.num_concepts(),
                head.num_classes(),
                cbl.num_concepts(),
                info.classes.len()
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            cbl,
            head,
        })
    }

    pub fn load_bundle(&self) -> Result<DatasetBundle, PipelineError> {
        Ok(load_bundle(&self.info.manifest)?)
    }
}
