//! Dataset manifests: a JSON document naming every tensor file of a
//! dataset export together with its SHA-256 checksum.
//!
//! Schema (version 1), all paths relative to the manifest's directory:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "dataset": "cifar10",
//!   "activation_cutoff": 0.25,
//!   "text_embeddings_normalized": true,
//!   "splits": { "train": 50000, "val": 10000 },
//!   "files": {
//!     "class_names":       { "path": "classes.txt",   "sha256": "..." },
//!     "concepts":          { "path": "concepts.txt",  "sha256": "..." },
//!     "train_features":    { "path": "train_features.npy", "sha256": "..." },
//!     "val_features":      { "path": "val_features.npy",   "sha256": "..." },
//!     "train_activations": { "path": "train_P.npy",   "sha256": "..." },
//!     "val_activations":   { "path": "val_P.npy",     "sha256": "..." },
//!     "train_labels":      { "path": "train_labels.npy", "sha256": "..." },
//!     "val_labels":        { "path": "val_labels.npy",   "sha256": "..." }
//!   },
//!   "embedding_spaces": [
//!     { "name": "clip",
//!       "concepts": { "path": "clip_concepts.npy", "sha256": "..." },
//!       "classes":  { "path": "clip_classes.npy",  "sha256": "..." } }
//!   ]
//! }
//! ```
//!
//! Text files hold one UTF-8 entry per line. Label files are 1-D integer
//! `.npy` arrays; everything else is a 2-D float `.npy` matrix.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concepts::ConceptSet;
use crate::npy::{self, NpyError};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest JSON: {0}")]
    ManifestJson(#[from] serde_json::Error),
    #[error("unsupported manifest format version {0}")]
    UnsupportedVersion(u32),
    #[error("activation cutoff {0} outside (-1, 1)")]
    CutoffOutOfRange(f64),
    #[error("referenced file {0} does not exist")]
    MissingFile(String),
    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("{path}: {source}")]
    Npy {
        path: String,
        #[source]
        source: NpyError,
    },
    #[error("cannot read {path}: {source}")]
    TextIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch between {left} and {right}: {detail}")]
    ShapeMismatch {
        left: String,
        right: String,
        detail: String,
    },
    #[error("P columns != concept count ({split}: {columns} columns, {concepts} concepts)")]
    ActivationColumns {
        split: &'static str,
        columns: usize,
        concepts: usize,
    },
    #[error("label out of range: {split} label {label} at index {index} with {classes} classes")]
    LabelOutOfRange {
        split: &'static str,
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("missing embedding space: {0}")]
    MissingEmbeddingSpace(String),
    #[error("duplicate embedding space {0:?}")]
    DuplicateEmbeddingSpace(String),
    #[error("split size for {split} is {declared} in manifest but data has {actual} rows")]
    SplitSize {
        split: &'static str,
        declared: usize,
        actual: usize,
    },
    #[error("cannot write {path}: {source}")]
    WriteIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub class_names: FileRef,
    pub concepts: FileRef,
    pub train_features: FileRef,
    pub val_features: FileRef,
    pub train_activations: FileRef,
    pub val_activations: FileRef,
    pub train_labels: FileRef,
    pub val_labels: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpaceRef {
    pub name: String,
    pub concepts: FileRef,
    pub classes: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset: String,
    /// Dataset-specific cutoff for the top-5 activation filter.
    pub activation_cutoff: f64,
    /// Whether the exporter wrote unit-normalized text embeddings.
    #[serde(default)]
    pub text_embeddings_normalized: bool,
    pub splits: SplitSizes,
    pub files: ManifestFiles,
    pub embedding_spaces: Vec<EmbeddingSpaceRef>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, BundleError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| BundleError::ManifestIo {
            path: path.display().to_string(),
            source,
        })?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(BundleError::UnsupportedVersion(m.format_version));
        }
        if !(m.activation_cutoff > -1.0 && m.activation_cutoff < 1.0) {
            return Err(BundleError::CutoffOutOfRange(m.activation_cutoff));
        }
        Ok(m)
    }
}

/// Text embeddings of every concept and every class in one encoder space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    pub name: String,
    pub concepts: Tensor,
    pub classes: Tensor,
}

/// Everything the engine needs from a dataset export, fully validated.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub activation_cutoff: f64,
    pub train_features: Tensor,
    pub val_features: Tensor,
    pub train_p: Tensor,
    pub val_p: Tensor,
    pub train_labels: Vec<usize>,
    pub val_labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub concepts: ConceptSet,
    pub embeddings: Vec<EmbeddingSpace>,
}

fn mismatch(left: &str, right: &str, detail: String) -> BundleError {
    BundleError::ShapeMismatch {
        left: left.to_string(),
        right: right.to_string(),
        detail,
    }
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.train_features.cols()
    }

    /// Checks every cross-tensor invariant.
    pub fn validate(&self) -> Result<(), BundleError> {
        let m = self.concepts.len();
        let dz = self.class_names.len();
        if self.train_features.cols() != self.val_features.cols() {
            return Err(mismatch(
                "train_features",
                "val_features",
                format!(
                    "feature dims {} vs {}",
                    self.train_features.cols(),
                    self.val_features.cols()
                ),
            ));
        }
        for (split, feats, p, labels) in [
            ("train", &self.train_features, &self.train_p, &self.train_labels),
            ("val", &self.val_features, &self.val_p, &self.val_labels),
        ] {
            if feats.rows() != labels.len() {
                return Err(mismatch(
                    &format!("{split}_features"),
                    &format!("{split}_labels"),
                    format!("{} rows vs {} labels", feats.rows(), labels.len()),
                ));
            }
            if p.rows() != feats.rows() {
                return Err(mismatch(
                    &format!("{split}_activations"),
                    &format!("{split}_features"),
                    format!("{} rows vs {} rows", p.rows(), feats.rows()),
                ));
            }
            if p.cols() != m {
                return Err(BundleError::ActivationColumns {
                    split: if split == "train" { "train" } else { "val" },
                    columns: p.cols(),
                    concepts: m,
                });
            }
            if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= dz) {
                return Err(BundleError::LabelOutOfRange {
                    split: if split == "train" { "train" } else { "val" },
                    index,
                    label,
                    classes: dz,
                });
            }
        }
        if self.embeddings.is_empty() {
            return Err(BundleError::MissingEmbeddingSpace(
                "at least one text embedding space is required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for space in &self.embeddings {
            if !seen.insert(space.name.as_str()) {
                return Err(BundleError::DuplicateEmbeddingSpace(space.name.clone()));
            }
            let cname = format!("{}.concepts", space.name);
            let kname = format!("{}.classes", space.name);
            if space.concepts.rows() != m {
                return Err(mismatch(
                    &cname,
                    "concepts",
                    format!("{} rows vs {} concepts", space.concepts.rows(), m),
                ));
            }
            if space.classes.rows() != dz {
                return Err(mismatch(
                    &kname,
                    "class_names",
                    format!("{} rows vs {} classes", space.classes.rows(), dz),
                ));
            }
            if space.concepts.cols() != space.classes.cols() {
                return Err(mismatch(
                    &cname,
                    &kname,
                    format!(
                        "embedding dims {} vs {}",
                        space.concepts.cols(),
                        space.classes.cols()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Restricts the bundle to the listed concept indices: activation
    /// columns, embedding rows and the concept list shrink together.
    pub fn select_concepts(&self, indices: &[usize]) -> DatasetBundle {
        DatasetBundle {
            train_p: self.train_p.select_columns(indices),
            val_p: self.val_p.select_columns(indices),
            concepts: ConceptSet::from_texts(
                indices.iter().map(|&i| self.concepts.entries()[i].text.clone()),
            ),
            embeddings: self
                .embeddings
                .iter()
                .map(|s| EmbeddingSpace {
                    name: s.name.clone(),
                    concepts: s.concepts.select_rows(indices),
                    classes: s.classes.clone(),
                })
                .collect(),
            ..self.clone()
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String, BundleError> {
    let bytes = fs::read(path).map_err(|_| BundleError::MissingFile(path.display().to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn resolve(base: &Path, file: &FileRef) -> Result<PathBuf, BundleError> {
    let p = base.join(&file.path);
    if !p.is_file() {
        return Err(BundleError::MissingFile(p.display().to_string()));
    }
    let actual = sha256_file(&p)?;
    if !actual.eq_ignore_ascii_case(&file.sha256) {
        return Err(BundleError::Checksum {
            path: p.display().to_string(),
            expected: file.sha256.clone(),
            actual,
        });
    }
    Ok(p)
}

fn load_tensor(base: &Path, file: &FileRef) -> Result<Tensor, BundleError> {
    let p = resolve(base, file)?;
    npy::read_tensor(&p).map_err(|source| BundleError::Npy {
        path: p.display().to_string(),
        source,
    })
}

fn load_labels(base: &Path, file: &FileRef) -> Result<Vec<usize>, BundleError> {
    let p = resolve(base, file)?;
    npy::read_labels(&p).map_err(|source| BundleError::Npy {
        path: p.display().to_string(),
        source,
    })
}

/// Reads a UTF-8 file with one entry per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>, BundleError> {
    let text = fs::read_to_string(path).map_err(|source| BundleError::TextIo {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), BundleError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| BundleError::WriteIo {
        path: path.display().to_string(),
        source,
    })
}

fn load_text(base: &Path, file: &FileRef) -> Result<Vec<String>, BundleError> {
    let p = resolve(base, file)?;
    read_lines(&p)
}

/// Loads and validates every file named by the manifest.
pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<DatasetBundle, BundleError> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let f = &manifest.files;

    let mut embeddings = Vec::with_capacity(manifest.embedding_spaces.len());
    for space in &manifest.embedding_spaces {
        embeddings.push(EmbeddingSpace {
            name: space.name.clone(),
            concepts: load_tensor(base, &space.concepts)?,
            classes: load_tensor(base, &space.classes)?,
        });
    }

    let bundle = DatasetBundle {
        name: manifest.dataset.clone(),
        activation_cutoff: manifest.activation_cutoff,
        train_features: load_tensor(base, &f.train_features)?,
        val_features: load_tensor(base, &f.val_features)?,
        train_p: load_tensor(base, &f.train_activations)?,
        val_p: load_tensor(base, &f.val_activations)?,
        train_labels: load_labels(base, &f.train_labels)?,
        val_labels: load_labels(base, &f.val_labels)?,
        class_names: load_text(base, &f.class_names)?,
        concepts: ConceptSet::from_texts(load_text(base, &f.concepts)?),
        embeddings,
    };
    for (split, declared, actual) in [
        ("train", manifest.splits.train, bundle.train_features.rows()),
        ("val", manifest.splits.val, bundle.val_features.rows()),
    ] {
        if declared != actual {
            return Err(BundleError::SplitSize {
                split: if split == "train" { "train" } else { "val" },
                declared,
                actual,
            });
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle as a manifest directory and returns the manifest path.
/// Concept statuses are not persisted; every concept is written as a
/// plain line.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<PathBuf, BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| BundleError::WriteIo {
        path: dir.display().to_string(),
        source,
    })?;
    let npy_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| BundleError::Npy { path, source }
    };
    let put_tensor = |name: &str, t: &Tensor| -> Result<FileRef, BundleError> {
        let p = dir.join(name);
        npy::write_tensor(t, &p).map_err(npy_err(&p))?;
        Ok(FileRef {
            path: name.to_string(),
            sha256: sha256_file(&p)?,
        })
    };
    let put_labels = |name: &str, l: &[usize]| -> Result<FileRef, BundleError> {
        let p = dir.join(name);
        npy::write_labels(l, &p).map_err(npy_err(&p))?;
        Ok(FileRef {
            path: name.to_string(),
            sha256: sha256_file(&p)?,
        })
    };
    let put_text = |name: &str, lines: &[String]| -> Result<FileRef, BundleError> {
        let p = dir.join(name);
        write_lines(&p, lines)?;
        Ok(FileRef {
            path: name.to_string(),
            sha256: sha256_file(&p)?,
        })
    };

    let files = ManifestFiles {
        class_names: put_text("classes.txt", &bundle.class_names)?,
        concepts: put_text("concepts.txt", &bundle.concepts.texts())?,
        train_features: put_tensor("train_features.npy", &bundle.train_features)?,
        val_features: put_tensor("val_features.npy", &bundle.val_features)?,
        train_activations: put_tensor("train_P.npy", &bundle.train_p)?,
        val_activations: put_tensor("val_P.npy", &bundle.val_p)?,
        train_labels: put_labels("train_labels.npy", &bundle.train_labels)?,
        val_labels: put_labels("val_labels.npy", &bundle.val_labels)?,
    };
    let mut spaces = Vec::new();
    for s in &bundle.embeddings {
        spaces.push(EmbeddingSpaceRef {
            name: s.name.clone(),
            concepts: put_tensor(&format!("{}_concepts.npy", s.name), &s.concepts)?,
            classes: put_tensor(&format!("{}_classes.npy", s.name), &s.classes)?,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dataset: bundle.name.clone(),
        activation_cutoff: bundle.activation_cutoff,
        text_embeddings_normalized: true,
        splits: SplitSizes {
            train: bundle.train_features.rows(),
            val: bundle.val_features.rows(),
        },
        files,
        embedding_spaces: spaces,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|source| BundleError::WriteIo {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}
