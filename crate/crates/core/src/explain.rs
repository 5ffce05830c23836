//! Decision explanations (per-input concept contributions) and global
//! weight graphs for the final layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbl::{CblError, CblModel};
use crate::head::{HeadError, SparseHead};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("class index {index} out of range ({classes} classes)")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("model has {model} concepts but head expects {head}")]
    ConceptMismatch { model: usize, head: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Cbl(#[from] CblError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// One additive term `W_F[class, j] * a_j` of a class logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub concept: usize,
    pub name: String,
    pub weight: f64,
    pub activation: f64,
    pub contribution: f64,
    /// `NOT <name>` when the concept's activation is negative.
    pub label: String,
}

fn display_label(name: &str, negative: bool) -> String {
    if negative {
        format!("NOT {name}")
    } else {
        name.to_string()
    }
}

fn check_class(head: &SparseHead, class: usize) -> Result<(), ExplainError> {
    if class >= head.num_classes() {
        return Err(ExplainError::ClassOutOfRange {
            index: class,
            classes: head.num_classes(),
        });
    }
    Ok(())
}

/// Contributions of every concept with a nonzero weight into `class`,
/// sorted by decreasing magnitude; ties keep concept order.
pub fn contributions_from_activations(
    concept_names: &[String],
    head: &SparseHead,
    activations: &[f64],
    class: usize,
) -> Result<Vec<Contribution>, ExplainError> {
    check_class(head, class)?;
    if activations.len() != head.num_concepts() || concept_names.len() != head.num_concepts() {
        return Err(ExplainError::ConceptMismatch {
            model: activations.len().min(concept_names.len()),
            head: head.num_concepts(),
        });
    }
    let mut out: Vec<Contribution> = head
        .weights
        .row(class)
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(j, &w)| {
            let a = activations[j];
            Contribution {
                concept: j,
                name: concept_names[j].clone(),
                weight: w,
                activation: a,
                contribution: w * a,
                label: display_label(&concept_names[j], a < 0.0),
            }
        })
        .collect();
    out.sort_by(|x, y| y.contribution.abs().total_cmp(&x.contribution.abs()));
    Ok(out)
}

pub fn contributions(
    model: &CblModel,
    head: &SparseHead,
    feature_row: &[f32],
    class: usize,
) -> Result<Vec<Contribution>, ExplainError> {
    if model.num_concepts() != head.num_concepts() {
        return Err(ExplainError::ConceptMismatch {
            model: model.num_concepts(),
            head: head.num_concepts(),
        });
    }
    let a = model.project(feature_row)?;
    contributions_from_activations(&model.concept_names, head, &a, class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub class: usize,
    pub class_name: String,
    pub logit: f64,
    pub bias: f64,
    pub entries: Vec<Contribution>,
    /// Σ top-k |contribution| / Σ all |contribution|; 1 when the row is empty.
    pub explained_fraction: f64,
}

/// Top-`k` contributions toward the predicted class.
pub fn explain_activations(
    concept_names: &[String],
    head: &SparseHead,
    activations: &[f64],
    k: usize,
) -> Result<ExplanationView, ExplainError> {
    if k == 0 {
        return Err(ExplainError::ZeroK);
    }
    let (logits, class) = head.predict(activations)?;
    let all = contributions_from_activations(concept_names, head, activations, class)?;
    let total: f64 = all.iter().map(|c| c.contribution.abs()).sum();
    let entries: Vec<Contribution> = all.into_iter().take(k).collect();
    let top: f64 = entries.iter().map(|c| c.contribution.abs()).sum();
    Ok(ExplanationView {
        class,
        class_name: head.class_names[class].clone(),
        logit: logits[class],
        bias: head.bias[class],
        explained_fraction: if total > 0.0 { top / total } else { 1.0 },
        entries,
    })
}

pub fn top_explanations(
    model: &CblModel,
    head: &SparseHead,
    feature_row: &[f32],
    k: usize,
) -> Result<ExplanationView, ExplainError> {
    let a = model.project(feature_row)?;
    explain_activations(&model.concept_names, head, &a, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Concept,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub concept: usize,
    pub class: usize,
    pub weight: f64,
    /// `NOT <concept>` for negative weights.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGraph {
    pub threshold: f64,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Every `|W_F[i, j]| > min_abs_weight` into the requested classes.
pub fn export_weight_graph(
    head: &SparseHead,
    concept_names: &[String],
    classes: &[usize],
    min_abs_weight: f64,
) -> Result<WeightGraph, ExplainError> {
    for &c in classes {
        check_class(head, c)?;
    }
    if concept_names.len() != head.num_concepts() {
        return Err(ExplainError::ConceptMismatch {
            model: concept_names.len(),
            head: head.num_concepts(),
        });
    }
    let mut edges = Vec::new();
    let mut used = vec![false; head.num_concepts()];
    for &c in classes {
        for (j, &w) in head.weights.row(c).iter().enumerate() {
            if w.abs() > min_abs_weight {
                used[j] = true;
                edges.push(GraphEdge {
                    concept: j,
                    class: c,
                    weight: w,
                    label: display_label(&concept_names[j], w < 0.0),
                });
            }
        }
    }
    let mut nodes: Vec<GraphNode> = classes
        .iter()
        .map(|&c| GraphNode {
            kind: NodeKind::Class,
            index: c,
            name: head.class_names[c].clone(),
        })
        .collect();
    nodes.extend(used.iter().enumerate().filter(|(_, &u)| u).map(|(j, _)| GraphNode {
        kind: NodeKind::Concept,
        index: j,
        name: concept_names[j].clone(),
    }));
    Ok(WeightGraph {
        threshold: min_abs_weight,
        nodes,
        edges,
    })
}
