//! Concept sets and the four text/activation filters that prune a raw
//! concept list before the bottleneck layer is trained.
//!
//! Filters never reorder or delete entries: a filtered-out concept stays in
//! the set with a `Removed` status naming the filter and the evidence, so
//! column indices into the activation matrix remain valid throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetBundle, EmbeddingSpace};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("zero-norm embedding in space {space:?}")]
    ZeroNorm { space: String },
    #[error("embedding spaces differ: {0:?} vs {1:?}")]
    SpaceMismatch(Vec<String>, Vec<String>),
    #[error("missing embedding row {row} in space {space:?} ({rows} rows)")]
    MissingEmbedding { space: String, row: usize, rows: usize },
    #[error("similarity threshold {0} outside [-1, 1]")]
    ThresholdOutOfRange(f64),
    #[error("maximum length must be at least 1")]
    ZeroMaxLength,
    #[error("activation filter needs at least 5 samples, got {0}")]
    TooFewSamples(usize),
    #[error("activation matrix has {columns} columns for {concepts} concepts")]
    ColumnMismatch { columns: usize, concepts: usize },
}

/// Numbered as in the five-stage concept pipeline; filter 5 is applied by
/// the bottleneck trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterId {
    Length = 1,
    ClassSimilarity = 2,
    ConceptSimilarity = 3,
    Activation = 4,
    Fidelity = 5,
}

impl FilterId {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemovalReason {
    TooLong { chars: usize, max_len: usize },
    SimilarToClass { class: String, similarity: f64 },
    DuplicateOf { concept: String, similarity: f64 },
    LowActivation { top5_mean: f64, cutoff: f64 },
    LowFidelity { fidelity: f64, cutoff: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ConceptStatus {
    Kept,
    Removed {
        filter: FilterId,
        reason: RemovalReason,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub text: String,
    pub status: ConceptStatus,
}

impl ConceptEntry {
    pub fn is_kept(&self) -> bool {
        matches!(self.status, ConceptStatus::Kept)
    }
}

/// Ordered concept list with per-entry status.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    entries: Vec<ConceptEntry>,
}

impl ConceptSet {
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: texts
                .into_iter()
                .map(|t| ConceptEntry {
                    text: t.into(),
                    status: ConceptStatus::Kept,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn texts(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.text.clone()).collect()
    }

    /// Original indices of the kept entries, in order.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_kept())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn kept_texts(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.is_kept())
            .map(|e| e.text.clone())
            .collect()
    }

    pub fn kept_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_kept()).count()
    }

    /// Marks entry `index` as removed. Already-removed entries keep their
    /// original status.
    pub fn remove(&mut self, index: usize, filter: FilterId, reason: RemovalReason) {
        let e = &mut self.entries[index];
        if e.is_kept() {
            e.status = ConceptStatus::Removed { filter, reason };
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean over named embedding spaces of the cosine similarity between two
/// items. Both sides must name the same spaces in the same order.
pub fn ensemble_similarity(a: &[(&str, &[f32])], b: &[(&str, &[f32])]) -> Result<f64, FilterError> {
    let names = |v: &[(&str, &[f32])]| v.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>();
    if a.is_empty() || names(a) != names(b) {
        return Err(FilterError::SpaceMismatch(names(a), names(b)));
    }
    let mut total = 0.0;
    for ((space, x), (_, y)) in a.iter().zip(b) {
        total += cosine(x, y).ok_or_else(|| FilterError::ZeroNorm {
            space: space.to_string(),
        })?;
    }
    Ok(total / a.len() as f64)
}

/// Unit-normalized `f64` copies of one side (concepts or classes) of every
/// space, so pairwise ensemble similarity is a mean of dot products.
struct NormalizedSide {
    spaces: Vec<(String, Vec<Vec<f64>>)>,
}

impl NormalizedSide {
    fn build<'a>(
        spaces: &'a [EmbeddingSpace],
        side: impl Fn(&'a EmbeddingSpace) -> &'a Tensor,
        rows: &[usize],
    ) -> Result<Self, FilterError> {
        let mut out = Vec::with_capacity(spaces.len());
        for s in spaces {
            let t = side(s);
            let mut vecs = vec![Vec::new(); rows.iter().max().map_or(0, |m| m + 1)];
            for &r in rows {
                if r >= t.rows() {
                    return Err(FilterError::MissingEmbedding {
                        space: s.name.clone(),
                        row: r,
                        rows: t.rows(),
                    });
                }
                let v: Vec<f64> = t.row(r).iter().map(|&x| x as f64).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(FilterError::ZeroNorm {
                        space: s.name.clone(),
                    });
                }
                vecs[r] = v.into_iter().map(|x| x / norm).collect();
            }
            out.push((s.name.clone(), vecs));
        }
        Ok(Self { spaces: out })
    }

    fn similarity(&self, i: usize, other: &NormalizedSide, j: usize) -> f64 {
        let mut total = 0.0;
        for ((_, a), (_, b)) in self.spaces.iter().zip(&other.spaces) {
            let d: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
            total += d.clamp(-1.0, 1.0);
        }
        total / self.spaces.len() as f64
    }
}

fn check_threshold(t: f64) -> Result<(), FilterError> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(FilterError::ThresholdOutOfRange(t));
    }
    Ok(())
}

/// Filter 1: removes concepts longer than `max_len` Unicode scalar values.
pub fn filter_by_length(set: &ConceptSet, max_len: usize) -> Result<ConceptSet, FilterError> {
    if max_len == 0 {
        return Err(FilterError::ZeroMaxLength);
    }
    let mut out = set.clone();
    for i in set.kept_indices() {
        let chars = set.entries[i].text.chars().count();
        if chars > max_len {
            out.remove(i, FilterId::Length, RemovalReason::TooLong { chars, max_len });
        }
    }
    Ok(out)
}

/// Filter 2: removes concepts whose ensemble similarity to any class name
/// exceeds `threshold`. A concept spelled exactly like a class is always
/// removed. The recorded class is the most similar offender.
pub fn filter_similar_to_classes(
    set: &ConceptSet,
    class_names: &[String],
    spaces: &[EmbeddingSpace],
    threshold: f64,
) -> Result<ConceptSet, FilterError> {
    check_threshold(threshold)?;
    let kept = set.kept_indices();
    let mut out = set.clone();
    if kept.is_empty() || class_names.is_empty() {
        return Ok(out);
    }
    let concepts = NormalizedSide::build(spaces, |s| &s.concepts, &kept)?;
    let class_rows: Vec<usize> = (0..class_names.len()).collect();
    let classes = NormalizedSide::build(spaces, |s| &s.classes, &class_rows)?;

    for i in kept {
        let text = &set.entries[i].text;
        let mut worst: Option<(usize, f64)> = None;
        for (k, name) in class_names.iter().enumerate() {
            let sim = if name == text {
                1.0
            } else {
                concepts.similarity(i, &classes, k)
            };
            let exceeds = sim > threshold || name == text;
            if exceeds && worst.is_none_or(|(_, w)| sim > w) {
                worst = Some((k, sim));
            }
        }
        if let Some((k, similarity)) = worst {
            out.remove(
                i,
                FilterId::ClassSimilarity,
                RemovalReason::SimilarToClass {
                    class: class_names[k].clone(),
                    similarity,
                },
            );
        }
    }
    Ok(out)
}

/// Filter 3: scans kept concepts in list order and removes any concept that
/// has ensemble similarity above `threshold` to an earlier concept that was
/// itself kept. Identical strings always count as duplicates.
pub fn dedupe_similar(
    set: &ConceptSet,
    spaces: &[EmbeddingSpace],
    threshold: f64,
) -> Result<ConceptSet, FilterError> {
    check_threshold(threshold)?;
    let kept = set.kept_indices();
    let mut out = set.clone();
    if kept.is_empty() {
        return Ok(out);
    }
    let norm = NormalizedSide::build(spaces, |s| &s.concepts, &kept)?;
    let mut survivors: Vec<usize> = Vec::with_capacity(kept.len());
    for i in kept {
        let text = &set.entries[i].text;
        let mut twin: Option<(usize, f64)> = None;
        for &j in &survivors {
            let same = set.entries[j].text == *text;
            let sim = if same { 1.0 } else { norm.similarity(i, &norm, j) };
            if (sim > threshold || same) && twin.is_none_or(|(_, s)| sim > s) {
                twin = Some((j, sim));
            }
        }
        match twin {
            Some((j, similarity)) => out.remove(
                i,
                FilterId::ConceptSimilarity,
                RemovalReason::DuplicateOf {
                    concept: set.entries[j].text.clone(),
                    similarity,
                },
            ),
            None => survivors.push(i),
        }
    }
    Ok(out)
}

/// Mean of the five largest entries of column `col`.
pub fn top5_mean(p: &Tensor, col: usize) -> f64 {
    let mut column = p.column(col);
    column.sort_by(|a, b| b.total_cmp(a));
    column.iter().take(5).sum::<f64>() / 5.0
}

/// Filter 4: keeps concept `j` iff the mean of its five largest activations
/// over the training set is at least `cutoff`. Columns of `p_train` are
/// indexed by the set's original entry positions.
pub fn filter_by_activation(
    set: &ConceptSet,
    p_train: &Tensor,
    cutoff: f64,
) -> Result<ConceptSet, FilterError> {
    if p_train.cols() != set.len() {
        return Err(FilterError::ColumnMismatch {
            columns: p_train.cols(),
            concepts: set.len(),
        });
    }
    if p_train.rows() < 5 {
        return Err(FilterError::TooFewSamples(p_train.rows()));
    }
    let mut out = set.clone();
    for j in set.kept_indices() {
        let top5_mean = top5_mean(p_train, j);
        if top5_mean < cutoff {
            out.remove(
                j,
                FilterId::Activation,
                RemovalReason::LowActivation { top5_mean, cutoff },
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_len: usize,
    pub class_threshold: f64,
    pub concept_threshold: f64,
    /// Overrides the manifest's dataset-specific cutoff when set.
    pub activation_cutoff: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_len: 30,
            class_threshold: 0.85,
            concept_threshold: 0.9,
            activation_cutoff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub index: usize,
    pub text: String,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    pub filter: FilterId,
    pub before: usize,
    pub after: usize,
    pub removed: Vec<Removal>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub initial_count: usize,
    pub final_count: usize,
    pub stages: Vec<FilterStage>,
}

impl FilterReport {
    pub fn total_removed(&self) -> usize {
        self.stages.iter().map(|s| s.removed.len()).sum()
    }

    pub fn stage(&self, filter: FilterId) -> Option<&FilterStage> {
        self.stages.iter().find(|s| s.filter == filter)
    }

    /// Appends a stage from the difference between two snapshots of a set.
    pub fn record(&mut self, filter: FilterId, before: &ConceptSet, after: &ConceptSet) {
        let removed: Vec<Removal> = before
            .entries
            .iter()
            .zip(&after.entries)
            .enumerate()
            .filter_map(|(i, (b, a))| match (&b.status, &a.status) {
                (ConceptStatus::Kept, ConceptStatus::Removed { reason, .. }) => Some(Removal {
                    index: i,
                    text: a.text.clone(),
                    reason: reason.clone(),
                }),
                _ => None,
            })
            .collect();
        if self.stages.is_empty() {
            self.initial_count = before.kept_count();
        }
        self.final_count = after.kept_count();
        self.stages.push(FilterStage {
            filter,
            before: before.kept_count(),
            after: after.kept_count(),
            removed,
        });
    }
}

/// Runs filters 1 through 4 in order. The returned set keeps every entry
/// of the input with updated statuses; use [`ConceptSet::kept_indices`] to
/// select the surviving activation columns.
pub fn run_filter_pipeline(
    set: &ConceptSet,
    bundle: &DatasetBundle,
    config: &FilterConfig,
) -> Result<(ConceptSet, FilterReport), FilterError> {
    let mut report = FilterReport {
        initial_count: set.kept_count(),
        final_count: set.kept_count(),
        stages: Vec::new(),
    };
    let cutoff = config.activation_cutoff.unwrap_or(bundle.activation_cutoff);

    let s1 = filter_by_length(set, config.max_len)?;
    report.record(FilterId::Length, set, &s1);
    let s2 = filter_similar_to_classes(&s1, &bundle.class_names, &bundle.embeddings, config.class_threshold)?;
    report.record(FilterId::ClassSimilarity, &s1, &s2);
    let s3 = dedupe_similar(&s2, &bundle.embeddings, config.concept_threshold)?;
    report.record(FilterId::ConceptSimilarity, &s2, &s3);
    let s4 = if s3.kept_count() == 0 {
        s3.clone()
    } else {
        filter_by_activation(&s3, &bundle.train_p, cutoff)?
    };
    report.record(FilterId::Activation, &s3, &s4);
    Ok((s4, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(name: &str, concepts: Vec<Vec<f32>>, classes: Vec<Vec<f32>>) -> EmbeddingSpace {
        let to_t = |rows: Vec<Vec<f32>>| {
            let cols = rows.first().map_or(2, |r| r.len());
            Tensor::new(rows.len(), cols, rows.concat()).unwrap()
        };
        EmbeddingSpace {
            name: name.into(),
            concepts: to_t(concepts),
            classes: to_t(classes),
        }
    }

    #[test]
    fn length_filter_boundaries() {
        let thirty = "a".repeat(30);
        let set = ConceptSet::from_texts([
            "white spots on the fur (in some cases)",
            thirty.as_str(),
            "",
            "ünïcödé ünïcödé ünïcödé ünïcödé",
        ]);
        let out = filter_by_length(&set, 30).unwrap();
        let kept: Vec<bool> = out.entries().iter().map(|e| e.is_kept()).collect();
        assert_eq!(kept, vec![false, true, true, false]);
        match &out.entries()[0].status {
            ConceptStatus::Removed {
                filter: FilterId::Length,
                reason: RemovalReason::TooLong { chars, max_len },
            } => {
                assert_eq!((*chars, *max_len), (38, 30));
            }
            s => panic!("unexpected status {s:?}"),
        }
        // 31 scalar values but more than 31 bytes
        assert_eq!(out.entries()[3].text.chars().count(), 31);
        assert!(matches!(filter_by_length(&set, 0), Err(FilterError::ZeroMaxLength)));
    }

    #[test]
    fn ensemble_of_identical_and_orthogonal() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let same = ensemble_similarity(&[("x", &a), ("y", &a)], &[("x", &a), ("y", &a)]).unwrap();
        assert_eq!(same, 1.0);
        let half = ensemble_similarity(&[("x", &a), ("y", &a)], &[("x", &a), ("y", &b)]).unwrap();
        assert_eq!(half, 0.5);
        let zero = [0.0f32, 0.0];
        assert!(matches!(
            ensemble_similarity(&[("x", &zero)], &[("x", &a)]),
            Err(FilterError::ZeroNorm { .. })
        ));
        assert!(matches!(
            ensemble_similarity(&[("x", &a)], &[("y", &a)]),
            Err(FilterError::SpaceMismatch(..))
        ));
    }

    #[test]
    fn ensemble_matches_independent_cosines() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut v = || -> Vec<f32> {
                let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                raw.iter().map(|x| (x / n) as f32).collect()
            };
            let (a1, a2, b1, b2) = (v(), v(), v(), v());
            // reference: angle-based evaluation in f64
            let reference = |x: &[f32], y: &[f32]| {
                let nx = x.iter().map(|&t| (t as f64).powi(2)).sum::<f64>().sqrt();
                let ny = y.iter().map(|&t| (t as f64).powi(2)).sum::<f64>().sqrt();
                let dist2: f64 = x
                    .iter()
                    .zip(y)
                    .map(|(&p, &q)| (p as f64 / nx - q as f64 / ny).powi(2))
                    .sum();
                1.0 - dist2 / 2.0
            };
            let want = (reference(&a1, &b1) + reference(&a2, &b2)) / 2.0;
            let got = ensemble_similarity(&[("s", &a1), ("t", &a2)], &[("s", &b1), ("t", &b2)]).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn class_filter_records_offending_class() {
        let cat = vec![1.0f32, 0.0, 0.0];
        let dog = vec![0.0f32, 1.0, 0.0];
        let near_cat = vec![0.99f32, 0.1, 0.0];
        let other = vec![0.0f32, 0.0, 1.0];
        let s = space(
            "clip",
            vec![near_cat.clone(), other.clone(), dog.clone()],
            vec![cat, dog],
        );
        let set = ConceptSet::from_texts(["a cat", "whiskers", "dog"]);
        let classes = vec!["cat".to_string(), "dog".to_string()];
        let out = filter_similar_to_classes(&set, &classes, std::slice::from_ref(&s), 0.85).unwrap();
        assert_eq!(out.kept_texts(), vec!["whiskers"]);
        match &out.entries()[0].status {
            ConceptStatus::Removed {
                reason: RemovalReason::SimilarToClass { class, similarity },
                ..
            } => {
                assert_eq!(class, "cat");
                assert!(*similarity > 0.85);
            }
            s => panic!("{s:?}"),
        }
        // threshold 1.0 keeps near matches but still drops the exact name
        let out = filter_similar_to_classes(&set, &classes, std::slice::from_ref(&s), 1.0).unwrap();
        assert_eq!(out.kept_texts(), vec!["a cat", "whiskers"]);
        assert_eq!(
            filter_similar_to_classes(&set, &classes, &[s], 1.0 + 1e-9),
            Err(FilterError::ThresholdOutOfRange(1.0 + 1e-9))
        );
    }

    #[test]
    fn class_filter_missing_row_is_error() {
        let s = space("clip", vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let set = ConceptSet::from_texts(["a", "b"]);
        let err = filter_similar_to_classes(&set, &["c".into()], &[s], 0.85).unwrap_err();
        assert!(matches!(err, FilterError::MissingEmbedding { row: 1, .. }));
    }

    fn unit(deg: f64) -> Vec<f32> {
        let r = deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32]
    }

    /// Independent reference: full similarity matrix, then sequential keep-first.
    fn greedy_oracle(vecs: &[Vec<f32>], threshold: f64) -> Vec<bool> {
        let n = vecs.len();
        let mut sim = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                sim[i][j] = cosine(&vecs[i], &vecs[j]).unwrap();
            }
        }
        let mut keep = vec![false; n];
        for i in 0..n {
            keep[i] = (0..i).all(|j| !keep[j] || sim[i][j] <= threshold);
        }
        keep
    }

    #[test]
    fn dedupe_chain_keeps_first_and_last() {
        let vecs = vec![unit(0.0), unit(22.0), unit(44.0)];
        assert!(cosine(&vecs[0], &vecs[1]).unwrap() > 0.9);
        assert!(cosine(&vecs[1], &vecs[2]).unwrap() > 0.9);
        assert!(cosine(&vecs[0], &vecs[2]).unwrap() < 0.9);
        let s = space("clip", vecs.clone(), vec![unit(90.0)]);
        let set = ConceptSet::from_texts(["A", "B", "C"]);
        let out = dedupe_similar(&set, &[s], 0.9).unwrap();
        let kept: Vec<bool> = out.entries().iter().map(|e| e.is_kept()).collect();
        assert_eq!(kept, greedy_oracle(&vecs, 0.9));
        assert_eq!(out.kept_texts(), vec!["A", "C"]);
        match &out.entries()[1].status {
            ConceptStatus::Removed {
                reason: RemovalReason::DuplicateOf { concept, .. },
                ..
            } => assert_eq!(concept, "A"),
            s => panic!("{s:?}"),
        }
    }

    #[test]
    fn dedupe_exact_duplicate_string() {
        let s = space("clip", vec![unit(0.0), unit(80.0), unit(160.0)], vec![unit(90.0)]);
        let set = ConceptSet::from_texts(["wheels", "fur", "wheels"]);
        let out = dedupe_similar(&set, std::slice::from_ref(&s), 0.9).unwrap();
        assert_eq!(out.kept_texts(), vec!["wheels", "fur"]);
        let out = dedupe_similar(&set, &[s], 1.0).unwrap();
        assert_eq!(out.kept_texts(), vec!["wheels", "fur"]);
    }

    #[test]
    fn dedupe_random_sets_have_no_close_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..9);
            let vecs: Vec<Vec<f32>> = (0..n).map(|_| unit(rng.random_range(0.0..120.0))).collect();
            let s = space("clip", vecs.clone(), vec![unit(90.0)]);
            let set = ConceptSet::from_texts((0..n).map(|i| format!("c{i}")));
            let out = dedupe_similar(&set, &[s], 0.9).unwrap();
            let kept = out.kept_indices();
            for &a in &kept {
                for &b in &kept {
                    if a < b {
                        assert!(cosine(&vecs[a], &vecs[b]).unwrap() <= 0.9);
                    }
                }
            }
            let flags: Vec<bool> = out.entries().iter().map(|e| e.is_kept()).collect();
            assert_eq!(flags, greedy_oracle(&vecs, 0.9));
        }
    }

    #[test]
    fn activation_filter_boundary_is_inclusive() {
        let col = [0.30f32, 0.29, 0.28, 0.27, 0.26, 0.0];
        let p = Tensor::new(6, 1, col.to_vec()).unwrap();
        let set = ConceptSet::from_texts(["x"]);
        let out = filter_by_activation(&set, &p, 0.28).unwrap();
        assert_eq!(out.kept_count(), 1);
        let out = filter_by_activation(&set, &p, -1.0).unwrap();
        assert_eq!(out.kept_count(), 1);
    }

    #[test]
    fn activation_filter_matches_per_column_oracle() {
        #[rustfmt::skip]
        let data = vec![
            0.31, 0.10, 0.24,
            0.30, 0.12, 0.26,
            0.22, 0.45, 0.25,
            0.28, 0.05, 0.27,
            0.26, 0.08, 0.20,
            0.10, 0.11, 0.24,
        ];
        let p = Tensor::new(6, 3, data.clone()).unwrap();
        let set = ConceptSet::from_texts(["a", "b", "c"]);
        let out = filter_by_activation(&set, &p, 0.25).unwrap();
        for j in 0..3 {
            let mut col: Vec<f64> = (0..6).map(|i| data[i * 3 + j] as f64).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mean = col[..5].iter().sum::<f64>() / 5.0;
            assert_eq!(out.entries()[j].is_kept(), mean >= 0.25, "column {j}");
        }
        assert_eq!(out.kept_texts(), vec!["a", "c"]);
    }

    #[test]
    fn activation_filter_needs_five_rows() {
        let p = Tensor::new(4, 1, vec![0.5; 4]).unwrap();
        let set = ConceptSet::from_texts(["a"]);
        assert_eq!(
            filter_by_activation(&set, &p, 0.2),
            Err(FilterError::TooFewSamples(4))
        );
    }

    #[test]
    fn report_conservation() {
        let set = ConceptSet::from_texts(["aaaa", "bb", "cccccc"]);
        let after = filter_by_length(&set, 3).unwrap();
        let mut report = FilterReport::default();
        report.record(FilterId::Length, &set, &after);
        assert_eq!(report.initial_count, 3);
        assert_eq!(report.final_count, 1);
        assert_eq!(report.initial_count - report.total_removed(), report.final_count);
    }
}
