//! Final-layer editing: the two-cell weight update that makes a chosen
//! class beat a wrong prediction by a fixed margin, a journal of applied
//! edits, validation impact, test-time intervention and error triage tags.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{HeadError, SparseHead};

/// Activations closer to zero than this cannot carry an edit.
pub const MIN_ACTIVATION: f64 = 1e-8;
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("ground truth and prediction are both class {0}")]
    SameClass(usize),
    #[error("class {index} out of range ({classes} classes)")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("concept {index} out of range ({concepts} concepts)")]
    ConceptOutOfRange { index: usize, concepts: usize },
    #[error("activation {value:e} of concept {concept} is too close to zero to edit")]
    NearZeroActivation { concept: usize, value: f64 },
    #[error("margin must be finite and non-negative, got {0}")]
    BadMargin(f64),
    #[error("unknown edit id {0}")]
    UnknownId(u64),
    #[error("edit {0} already reverted")]
    AlreadyReverted(u64),
    #[error("error type {0} outside 1..=4")]
    BadErrorType(u8),
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Head(#[from] HeadError),
}

fn check_class(head: &SparseHead, c: usize) -> Result<(), EditError> {
    if c >= head.num_classes() {
        return Err(EditError::ClassOutOfRange {
            index: c,
            classes: head.num_classes(),
        });
    }
    Ok(())
}

fn check_concept(head: &SparseHead, c: usize) -> Result<(), EditError> {
    if c >= head.num_concepts() {
        return Err(EditError::ConceptOutOfRange {
            index: c,
            concepts: head.num_concepts(),
        });
    }
    Ok(())
}

/// `Δw = (Δa + b) / (2 f_c[concept])` with `Δa = logit(pred) - logit(gt)`.
pub fn compute_delta_w(
    head: &SparseHead,
    activations: &[f64],
    gt: usize,
    pred: usize,
    concept: usize,
    margin: f64,
) -> Result<f64, EditError> {
    check_class(head, gt)?;
    check_class(head, pred)?;
    check_concept(head, concept)?;
    if gt == pred {
        return Err(EditError::SameClass(gt));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(EditError::BadMargin(margin));
    }
    let a = activations
        .get(concept)
        .copied()
        .ok_or(EditError::ConceptOutOfRange {
            index: concept,
            concepts: activations.len(),
        })?;
    if a.abs() <= MIN_ACTIVATION {
        return Err(EditError::NearZeroActivation { concept, value: a });
    }
    let logits = head.logits(activations)?;
    let delta_a = logits[pred] - logits[gt];
    Ok((delta_a + margin) / (2.0 * a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub gt: usize,
    pub pred: usize,
    pub concept: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Index of the input the edit was designed on.
    #[serde(default)]
    pub input: Option<usize>,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStatus {
    Applied,
    Reverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub n_val: usize,
    pub fixed: usize,
    pub broken: usize,
    pub correct_before: usize,
    pub correct_after: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `(correct_after - correct_before) / n_val`, equal to
    /// `(fixed - broken) / n_val`.
    pub delta_accuracy: f64,
    pub affected_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: u64,
    pub gt_class: usize,
    pub pred_class: usize,
    pub concept: usize,
    pub delta_w: f64,
    pub margin: f64,
    pub source_input: Option<usize>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub status: EditStatus,
    #[serde(default)]
    pub impact: Option<ImpactReport>,
}

/// Adds one record's update to `head`.
pub fn apply_record(head: &mut SparseHead, rec: &EditRecord) {
    head.weights[[rec.gt_class, rec.concept]] += rec.delta_w;
    head.weights[[rec.pred_class, rec.concept]] -= rec.delta_w;
}

/// Pristine head plus every applied record, in journal order.
pub fn replay(pristine: &SparseHead, records: &[EditRecord]) -> SparseHead {
    let mut head = pristine.clone();
    for rec in records.iter().filter(|r| r.status == EditStatus::Applied) {
        apply_record(&mut head, rec);
    }
    head.recount_nnz();
    head
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ErrorType {
    MislabeledInput = 1,
    MissingConcept = 2,
    WrongActivation = 3,
    WrongWeight = 4,
}

impl TryFrom<u8> for ErrorType {
    type Error = EditError;

    fn try_from(v: u8) -> Result<Self, EditError> {
        match v {
            1 => Ok(Self::MislabeledInput),
            2 => Ok(Self::MissingConcept),
            3 => Ok(Self::WrongActivation),
            4 => Ok(Self::WrongWeight),
            _ => Err(EditError::BadErrorType(v)),
        }
    }
}

impl From<ErrorType> for u8 {
    fn from(t: ErrorType) -> u8 {
        t as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTag {
    pub input: usize,
    #[serde(rename = "type")]
    pub error_type: ErrorType,
    #[serde(default)]
    pub note: String,
}

/// Working copy of a head with its edit journal and triage tags. The
/// working head always equals the pristine head plus the applied edits.
#[derive(Debug, Clone)]
pub struct EditSession {
    pristine: SparseHead,
    working: SparseHead,
    records: Vec<EditRecord>,
    tags: Vec<ErrorTag>,
}

impl EditSession {
    pub fn new(pristine: SparseHead) -> Self {
        Self {
            working: pristine.clone(),
            pristine,
            records: Vec::new(),
            tags: Vec::new(),
        }
    }

    /// Restores a session from persisted records and tags.
    pub fn with_journal(pristine: SparseHead, records: Vec<EditRecord>, tags: Vec<ErrorTag>) -> Result<Self, EditError> {
        for r in &records {
            check_class(&pristine, r.gt_class)?;
            check_class(&pristine, r.pred_class)?;
            check_concept(&pristine, r.concept)?;
        }
        Ok(Self {
            working: replay(&pristine, &records),
            pristine,
            records,
            tags,
        })
    }

    pub fn pristine(&self) -> &SparseHead {
        &self.pristine
    }

    pub fn working(&self) -> &SparseHead {
        &self.working
    }

    pub fn records(&self) -> &[EditRecord] {
        &self.records
    }

    pub fn record(&self, id: u64) -> Option<&EditRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn tags(&self) -> &[ErrorTag] {
        &self.tags
    }

    pub fn propose(&self, activations: &[f64], req: &EditRequest) -> Result<f64, EditError> {
        compute_delta_w(&self.working, activations, req.gt, req.pred, req.concept, req.margin)
    }

    /// Computes `Δw` on the working head for the given normalized
    /// activations and applies it.
    pub fn apply(&mut self, activations: &[f64], req: &EditRequest) -> Result<EditRecord, EditError> {
        let delta_w = self.propose(activations, req)?;
        let rec = EditRecord {
            id: self.records.iter().map(|r| r.id + 1).max().unwrap_or(1),
            gt_class: req.gt,
            pred_class: req.pred,
            concept: req.concept,
            delta_w,
            margin: req.margin,
            source_input: req.input,
            timestamp: now(),
            status: EditStatus::Applied,
            impact: None,
        };
        apply_record(&mut self.working, &rec);
        self.working.recount_nnz();
        self.records.push(rec.clone());
        Ok(rec)
    }

    /// Marks an edit reverted and rebuilds the working head by replay, so
    /// reverting restores the weights bit for bit.
    pub fn revert(&mut self, id: u64) -> Result<&EditRecord, EditError> {
        let idx = self
            .records
            .iter()
            .position(|r| r.id == id)
            .ok_or(EditError::UnknownId(id))?;
        if self.records[idx].status == EditStatus::Reverted {
            return Err(EditError::AlreadyReverted(id));
        }
        self.records[idx].status = EditStatus::Reverted;
        self.working = replay(&self.pristine, &self.records);
        Ok(&self.records[idx])
    }

    /// Impact of all applied edits on a validation split, stored on the
    /// record `id`.
    pub fn impact(&mut self, id: u64, val: ArrayView2<f64>, labels: &[usize]) -> Result<ImpactReport, EditError> {
        let idx = self
            .records
            .iter()
            .position(|r| r.id == id)
            .ok_or(EditError::UnknownId(id))?;
        let report = evaluate_impact(&self.pristine, &self.working, val, labels)?;
        self.records[idx].impact = Some(report.clone());
        Ok(report)
    }

    pub fn tag(&mut self, input: usize, error_type: u8, note: &str) -> Result<ErrorTag, EditError> {
        let tag = ErrorTag {
            input,
            error_type: ErrorType::try_from(error_type)?,
            note: note.to_string(),
        };
        self.tags.push(tag.clone());
        Ok(tag)
    }

    pub fn tags_of_type(&self, error_type: ErrorType) -> Vec<&ErrorTag> {
        self.tags.iter().filter(|t| t.error_type == error_type).collect()
    }
}

/// Compares predictions of two heads over a labeled split.
pub fn evaluate_impact(
    before: &SparseHead,
    after: &SparseHead,
    val: ArrayView2<f64>,
    labels: &[usize],
) -> Result<ImpactReport, EditError> {
    if val.nrows() != labels.len() || val.ncols() != before.num_concepts() || val.ncols() != after.num_concepts() {
        return Err(HeadError::Shape(format!(
            "{}x{} activations, {} labels, heads with {} and {} concepts",
            val.nrows(),
            val.ncols(),
            labels.len(),
            before.num_concepts(),
            after.num_concepts()
        ))
        .into());
    }
    let p0 = before.predict_all(val);
    let p1 = after.predict_all(val);
    let (mut fixed, mut broken, mut c0, mut c1) = (0, 0, 0, 0);
    let mut affected = BTreeSet::new();
    for ((&a, &b), &y) in p0.iter().zip(&p1).zip(labels) {
        let (ok0, ok1) = (a == y, b == y);
        c0 += ok0 as usize;
        c1 += ok1 as usize;
        if !ok0 && ok1 {
            fixed += 1;
        }
        if ok0 && !ok1 {
            broken += 1;
        }
        if a != b {
            affected.extend([y, a, b]);
        }
    }
    let n = labels.len();
    let nf = n.max(1) as f64;
    Ok(ImpactReport {
        n_val: n,
        fixed,
        broken,
        correct_before: c0,
        correct_after: c1,
        accuracy_before: c0 as f64 / nf,
        accuracy_after: c1 as f64 / nf,
        delta_accuracy: (c1 as f64 - c0 as f64) / nf,
        affected_classes: affected.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub before: usize,
    pub after: usize,
    pub logits_before: Vec<f64>,
    pub logits_after: Vec<f64>,
}

/// What-if prediction with some normalized activations overridden.
pub fn intervene(head: &SparseHead, activations: &[f64], overrides: &[(usize, f64)]) -> Result<Intervention, EditError> {
    let (logits_before, before) = head.predict(activations)?;
    let mut a = activations.to_vec();
    for &(c, v) in overrides {
        check_concept(head, c)?;
        a[c] = v;
    }
    let (logits_after, after) = head.predict(&a)?;
    Ok(Intervention {
        before,
        after,
        logits_before,
        logits_after,
    })
}

/// Indices whose prediction disagrees with the label.
pub fn mispredictions(head: &SparseHead, activations: ArrayView2<f64>, labels: &[usize]) -> Vec<usize> {
    head.predict_all(activations)
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, y))| p != y)
        .map(|(i, _)| i)
        .collect()
}

/// The `k` largest activations of one input, as `(concept, value)`.
pub fn top_activations(activations: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = activations.iter().copied().enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v.truncate(k);
    v
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EditError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        for item in items {
            serde_json::to_writer(&mut f, item)?;
            f.write_all(b"\n")?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EditError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EditError::Parse { line: i + 1, source: e }))
        .collect()
}

pub fn save_journal(path: &Path, records: &[EditRecord]) -> Result<(), EditError> {
    write_jsonl(path, records)
}

/// Missing journal files read as empty.
pub fn load_journal(path: &Path) -> Result<Vec<EditRecord>, EditError> {
    read_jsonl(path)
}

pub fn save_tags(path: &Path, tags: &[ErrorTag]) -> Result<(), EditError> {
    write_jsonl(path, tags)
}

pub fn load_tags(path: &Path) -> Result<Vec<ErrorTag>, EditError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1, Array2};

    fn head(w: Array2<f64>, b: Vec<f64>) -> SparseHead {
        let names = (0..w.nrows()).map(|i| format!("c{i}")).collect();
        SparseHead::new(w, Array1::from(b), names, 0.0, 1.0)
    }

    #[test]
    fn direct_substitution() {
        // logits: pred 1.0, gt 0.0 so Δa = 1; a = 0.75; b = 0.5
        let h = head(arr2(&[[0.0, 0.0], [0.0, 4.0 / 3.0]]), vec![0.0, 0.0]);
        let dw = compute_delta_w(&h, &[1.0, 0.75], 0, 1, 1, 0.5).unwrap();
        assert!((dw - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_margin_ties_logits() {
        let h = head(arr2(&[[0.3, -0.2], [0.9, 0.1]]), vec![0.1, -0.4]);
        let a = [1.5, -0.7];
        let mut s = EditSession::new(h);
        s.apply(&a, &EditRequest { gt: 0, pred: 1, concept: 0, margin: 0.0, input: None })
            .unwrap();
        let l = s.working().logits(&a).unwrap();
        assert!((l[0] - l[1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_requests() {
        let h = head(arr2(&[[0.3, -0.2], [0.9, 0.1]]), vec![0.0, 0.0]);
        assert!(matches!(compute_delta_w(&h, &[1.0, 1.0], 1, 1, 0, 0.5), Err(EditError::SameClass(1))));
        assert!(matches!(
            compute_delta_w(&h, &[1e-9, 1.0], 0, 1, 0, 0.5),
            Err(EditError::NearZeroActivation { concept: 0, .. })
        ));
        assert!(matches!(compute_delta_w(&h, &[1.0, 1.0], 0, 1, 0, -0.1), Err(EditError::BadMargin(_))));
        assert!(matches!(compute_delta_w(&h, &[1.0, 1.0], 0, 2, 0, 0.5), Err(EditError::ClassOutOfRange { .. })));
        assert!(matches!(compute_delta_w(&h, &[1.0, 1.0], 0, 1, 5, 0.5), Err(EditError::ConceptOutOfRange { .. })));
    }

    #[test]
    fn edit_touches_two_cells_and_reverts_exactly() {
        let w = arr2(&[[0.1, 0.2, 0.3], [0.4, -0.5, 0.6], [0.7, 0.8, -0.9]]);
        let h = head(w, vec![0.01, 0.02, 0.03]);
        let a = [0.3, -1.1, 2.2];
        let mut s = EditSession::new(h.clone());
        let rec = s.apply(&a, &EditRequest { gt: 2, pred: 0, concept: 1, margin: 0.2, input: Some(4) }).unwrap();
        let changed: Vec<(usize, usize)> = s
            .working()
            .weights
            .indexed_iter()
            .filter(|(ij, v)| **v != h.weights[*ij])
            .map(|(ij, _)| ij)
            .collect();
        assert_eq!(changed, vec![(0, 1), (2, 1)]);
        s.revert(rec.id).unwrap();
        assert_eq!(s.working().weights, h.weights);
        assert!(matches!(s.revert(rec.id), Err(EditError::AlreadyReverted(_))));
        assert!(matches!(s.revert(99), Err(EditError::UnknownId(99))));
    }

    #[test]
    fn disjoint_edits_commute() {
        let w = arr2(&[[0.1, 0.2, 0.3], [0.4, -0.5, 0.6], [0.7, 0.8, -0.9]]);
        let h = head(w, vec![0.0; 3]);
        let r1 = EditRecord {
            id: 1,
            gt_class: 0,
            pred_class: 1,
            concept: 0,
            delta_w: 0.123,
            margin: 0.5,
            source_input: None,
            timestamp: 0,
            status: EditStatus::Applied,
            impact: None,
        };
        let r2 = EditRecord { id: 2, gt_class: 2, pred_class: 1, concept: 2, delta_w: -0.77, ..r1.clone() };
        let a = replay(&h, &[r1.clone(), r2.clone()]);
        let b = replay(&h, &[r2, r1]);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn revert_out_of_order() {
        let w = arr2(&[[0.1, 0.2, 0.3], [0.4, -0.5, 0.6], [0.7, 0.8, -0.9]]);
        let h = head(w, vec![0.0; 3]);
        let a = [0.5, 1.5, -2.0];
        let mut s = EditSession::new(h.clone());
        let r1 = s.apply(&a, &EditRequest { gt: 0, pred: 2, concept: 0, margin: 0.5, input: None }).unwrap();
        let r2 = s.apply(&a, &EditRequest { gt: 1, pred: 2, concept: 1, margin: 0.5, input: None }).unwrap();
        s.revert(r1.id).unwrap();
        s.revert(r2.id).unwrap();
        assert_eq!(s.working().weights, h.weights);
    }

    #[test]
    fn zero_edit_has_no_impact() {
        let h = head(arr2(&[[1.0, 0.0], [0.0, 1.0]]), vec![0.0, 0.0]);
        let val = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 2.0]]);
        let r = evaluate_impact(&h, &h, val.view(), &[0, 1, 0]).unwrap();
        assert_eq!((r.fixed, r.broken), (0, 0));
        assert_eq!(r.delta_accuracy, 0.0);
        assert_eq!(r.accuracy_before, 2.0 / 3.0);
    }

    #[test]
    fn impact_identity() {
        let before = head(arr2(&[[1.0, 0.0], [0.0, 1.0]]), vec![0.0, 0.0]);
        let after = head(arr2(&[[1.0, 0.0], [0.0, 3.0]]), vec![0.0, 0.0]);
        let val = arr2(&[[1.0, 0.0], [1.0, 0.5], [2.0, 1.0], [0.0, 1.0]]);
        let labels = [0, 1, 0, 1];
        let r = evaluate_impact(&before, &after, val.view(), &labels).unwrap();
        assert_eq!((r.fixed, r.broken), (1, 1));
        assert_eq!(r.delta_accuracy, (r.fixed as f64 - r.broken as f64) / 4.0);
        assert_eq!(r.affected_classes, vec![0, 1]);
    }

    #[test]
    fn intervention_cases() {
        let h = head(arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), vec![0.0, 0.0]);
        let a = [0.5, 2.0, 7.0];
        let none = intervene(&h, &a, &[]).unwrap();
        assert_eq!(none.before, none.after);
        assert_eq!(none.logits_before, none.logits_after);
        let null = intervene(&h, &a, &[(2, 0.0)]).unwrap();
        assert_eq!(null.after, 1);
        let flip = intervene(&h, &a, &[(1, 0.0)]).unwrap();
        assert_eq!((flip.before, flip.after), (1, 0));
        assert!(intervene(&h, &a, &[(3, 0.0)]).is_err());
    }

    #[test]
    fn tags_crud() {
        let h = head(arr2(&[[1.0]]), vec![0.0]);
        let mut s = EditSession::new(h);
        s.tag(12, 4, "weights favor shopping basket").unwrap();
        s.tag(3, 1, "").unwrap();
        assert!(matches!(s.tag(1, 5, ""), Err(EditError::BadErrorType(5))));
        let t4 = s.tags_of_type(ErrorType::WrongWeight);
        assert_eq!(t4.len(), 1);
        assert_eq!(t4[0].input, 12);
        let json = serde_json::to_string(t4[0]).unwrap();
        assert!(json.contains("\"type\":4"));
        assert!(serde_json::from_str::<ErrorTag>(r#"{"input":1,"type":7}"#).is_err());
    }

    #[test]
    fn journal_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let w = arr2(&[[0.1, 0.2], [0.4, -0.5], [0.7, 0.8]]);
        let h = head(w, vec![0.0; 3]);
        let mut s = EditSession::new(h.clone());
        let a = [0.37, -1.3];
        s.apply(&a, &EditRequest { gt: 0, pred: 1, concept: 0, margin: 0.3, input: None }).unwrap();
        s.apply(&a, &EditRequest { gt: 2, pred: 1, concept: 1, margin: 1.7, input: Some(2) }).unwrap();
        s.apply(&a, &EditRequest { gt: 0, pred: 2, concept: 1, margin: 0.9, input: None }).unwrap();
        s.revert(2).unwrap();
        let path = dir.path().join("edits.jsonl");
        save_journal(&path, s.records()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let loaded = load_journal(&path).unwrap();
        assert_eq!(loaded, s.records());
        let restored = EditSession::with_journal(h, loaded, vec![]).unwrap();
        assert_eq!(restored.working().weights, s.working().weights);
        assert!(load_journal(&dir.path().join("missing.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn top_activation_order() {
        assert_eq!(top_activations(&[0.1, 3.0, -5.0, 2.0], 2), vec![(1, 3.0), (3, 2.0)]);
    }
}
