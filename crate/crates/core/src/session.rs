//! Live state behind the command line and the HTTP service: a model, its
//! dataset, the edit journal and triage tags.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbl::CblModel;
use crate::edit::{self, EditError, EditRecord, EditRequest, EditSession, ErrorTag, ImpactReport, Intervention};
use crate::explain::{self, ExplainError, ExplanationView, WeightGraph};
use crate::manifest::{load_bundle, DatasetBundle};
use crate::pipeline::{LoadedModel, ModelInfo, PipelineError};

pub const JOURNAL_FILE: &str = "edits.jsonl";
pub const TAGS_FILE: &str = "tags.jsonl";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("input {index} out of range ({count} {split} inputs)")]
    InputOutOfRange { split: Split, index: usize, count: usize },
    #[error("edit request needs a source input")]
    MissingInput,
    #[error("bundle has {bundle} classes and feature dim {dim}, model expects {classes} and {expected}")]
    Incompatible {
        bundle: usize,
        dim: usize,
        classes: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub dataset: String,
    pub concepts: usize,
    pub classes: Vec<String>,
    pub lambda: f64,
    pub alpha: f64,
    pub nnz_per_class: Vec<usize>,
    pub mean_nnz: f64,
    pub fidelity_min: f64,
    pub fidelity_mean: f64,
    pub val_accuracy: f64,
    pub n_val: usize,
    pub applied_edits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptActivation {
    pub concept: usize,
    pub name: String,
    pub activation: f64,
}

/// Model, data and edit state. The working head always equals the
/// pristine head plus the applied journal entries.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub info: ModelInfo,
    pub dir: PathBuf,
    pub bundle: DatasetBundle,
    pub model: CblModel,
    pub edits: EditSession,
    pub train_activations: Array2<f64>,
    pub val_activations: Array2<f64>,
}

impl SessionState {
    /// Opens a model directory with its journal; `manifest` overrides the
    /// one recorded at training time.
    pub fn open(dir: impl AsRef<Path>, manifest: Option<&Path>) -> Result<Self, SessionError> {
        let loaded = LoadedModel::load(dir.as_ref())?;
        let bundle = match manifest {
            Some(p) => load_bundle(p).map_err(PipelineError::from)?,
            None => loaded.load_bundle()?,
        };
        if bundle.num_classes() != loaded.head.num_classes() || bundle.feature_dim() != loaded.cbl.feature_dim() {
            return Err(SessionError::Incompatible {
                bundle: bundle.num_classes(),
                dim: bundle.feature_dim(),
                classes: loaded.head.num_classes(),
                expected: loaded.cbl.feature_dim(),
            });
        }
        let records = edit::load_journal(&loaded.dir.join(JOURNAL_FILE))?;
        let tags = edit::load_tags(&loaded.dir.join(TAGS_FILE))?;
        let train_activations = loaded.cbl.project_all(&bundle.train_features).map_err(PipelineError::from)?;
        let val_activations = loaded.cbl.project_all(&bundle.val_features).map_err(PipelineError::from)?;
        Ok(Self {
            edits: EditSession::with_journal(loaded.head, records, tags)?,
            info: loaded.info,
            dir: loaded.dir,
            bundle,
            model: loaded.cbl,
            train_activations,
            val_activations,
        })
    }

    /// Flushes the journal and tags to the model directory.
    pub fn persist(&self) -> Result<(), SessionError> {
        edit::save_journal(&self.dir.join(JOURNAL_FILE), self.edits.records())?;
        edit::save_tags(&self.dir.join(TAGS_FILE), self.edits.tags())?;
        Ok(())
    }

    pub fn activations(&self, split: Split) -> &Array2<f64> {
        match split {
            Split::Train => &self.train_activations,
            Split::Val => &self.val_activations,
        }
    }

    pub fn labels(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.bundle.train_labels,
            Split::Val => &self.bundle.val_labels,
        }
    }

    pub fn input(&self, split: Split, index: usize) -> Result<Vec<f64>, SessionError> {
        let acts = self.activations(split);
        if index >= acts.nrows() {
            return Err(SessionError::InputOutOfRange {
                split,
                index,
                count: acts.nrows(),
            });
        }
        Ok(acts.row(index).to_vec())
    }

    pub fn summary(&self) -> ModelSummary {
        let head = self.edits.working();
        let fid = &self.model.val_fidelity;
        ModelSummary {
            dataset: self.info.dataset.clone(),
            concepts: head.num_concepts(),
            classes: head.class_names.clone(),
            lambda: head.lambda,
            alpha: head.alpha,
            nnz_per_class: head.nnz_per_class.clone(),
            mean_nnz: head.mean_nnz(),
            fidelity_min: fid.iter().copied().fold(f64::INFINITY, f64::min),
            fidelity_mean: fid.iter().sum::<f64>() / fid.len().max(1) as f64,
            val_accuracy: head.accuracy(self.val_activations.view(), &self.bundle.val_labels),
            n_val: self.bundle.val_labels.len(),
            applied_edits: self
                .edits
                .records()
                .iter()
                .filter(|r| r.status == edit::EditStatus::Applied)
                .count(),
        }
    }

    pub fn inputs(&self, split: Split) -> Vec<InputSummary> {
        let preds = self.edits.working().predict_all(self.activations(split).view());
        preds
            .into_iter()
            .zip(self.labels(split))
            .enumerate()
            .map(|(index, (prediction, &label))| InputSummary {
                index,
                label,
                prediction,
                correct: prediction == label,
            })
            .collect()
    }

    pub fn explanation(&self, split: Split, index: usize, k: usize) -> Result<ExplanationView, SessionError> {
        let a = self.input(split, index)?;
        Ok(explain::explain_activations(
            &self.model.concept_names,
            self.edits.working(),
            &a,
            k,
        )?)
    }

    pub fn top_activations(&self, split: Split, index: usize, k: usize) -> Result<Vec<ConceptActivation>, SessionError> {
        let a = self.input(split, index)?;
        Ok(edit::top_activations(&a, k)
            .into_iter()
            .map(|(concept, activation)| ConceptActivation {
                concept,
                name: self.model.concept_names[concept].clone(),
                activation,
            })
            .collect())
    }

    pub fn weight_graph(&self, classes: &[usize], min_abs_weight: f64) -> Result<WeightGraph, SessionError> {
        Ok(explain::export_weight_graph(
            self.edits.working(),
            &self.model.concept_names,
            classes,
            min_abs_weight,
        )?)
    }

    pub fn intervene(&self, split: Split, index: usize, overrides: &[(usize, f64)]) -> Result<Intervention, SessionError> {
        let a = self.input(split, index)?;
        Ok(edit::intervene(self.edits.working(), &a, overrides)?)
    }

    pub fn propose(&self, split: Split, req: &EditRequest) -> Result<f64, SessionError> {
        let a = self.input(split, req.input.ok_or(SessionError::MissingInput)?)?;
        Ok(self.edits.propose(&a, req)?)
    }

    pub fn apply_edit(&mut self, split: Split, req: &EditRequest) -> Result<EditRecord, SessionError> {
        let a = self.input(split, req.input.ok_or(SessionError::MissingInput)?)?;
        Ok(self.edits.apply(&a, req)?)
    }

    pub fn revert_edit(&mut self, id: u64) -> Result<EditRecord, SessionError> {
        Ok(self.edits.revert(id)?.clone())
    }

    pub fn impact(&mut self, id: u64) -> Result<ImpactReport, SessionError> {
        let val = self.val_activations.clone();
        let labels = self.bundle.val_labels.clone();
        Ok(self.edits.impact(id, val.view(), &labels)?)
    }

    pub fn tag(&mut self, input: usize, error_type: u8, note: &str) -> Result<ErrorTag, SessionError> {
        Ok(self.edits.tag(input, error_type, note)?)
    }
}
