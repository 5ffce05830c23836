//! Planted-concept synthetic datasets. Each sample carries a sparse
//! nonnegative code over a known concept dictionary; features, labels and
//! concept activations are all derived from that code, so every stage of
//! the pipeline has a ground truth to be checked against.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::ConceptSet;
use crate::manifest::{write_bundle, BundleError, DatasetBundle, EmbeddingSpace};
use crate::npy::{self, NpyError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Config(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error("synth i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub d0: usize,
    /// Planted concepts.
    pub m_star: usize,
    pub d_z: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Distractors that never activate.
    pub absent: usize,
    /// Distractors that activate strongly but independently of the
    /// features.
    pub unlearnable: usize,
    pub embed_dim: usize,
    pub activation_cutoff: f64,
}

impl SynthConfig {
    /// N=2000, d0=64, M*=40, d_z=10, σ=0.1, seed 7.
    pub fn default_preset() -> Self {
        Self {
            n_train: 2000,
            n_val: 500,
            d0: 64,
            m_star: 40,
            d_z: 10,
            sigma: 0.1,
            seed: 7,
            absent: 10,
            unlearnable: 10,
            embed_dim: 64,
            activation_cutoff: 0.3,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_preset()),
            "small" => Some(Self {
                n_train: 400,
                n_val: 200,
                d0: 24,
                m_star: 12,
                d_z: 4,
                absent: 4,
                unlearnable: 4,
                embed_dim: 32,
                ..Self::default_preset()
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.m_star < self.d_z {
            return Err(SynthError::Config(format!(
                "{} planted concepts cannot cover {} classes",
                self.m_star, self.d_z
            )));
        }
        if self.d_z < 2 {
            return Err(SynthError::Config("need at least 2 classes".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SynthError::Config(format!("sigma {} must be non-negative", self.sigma)));
        }
        if self.n_train < 5 || self.n_val < 2 {
            return Err(SynthError::Config("need at least 5 train and 2 val samples".into()));
        }
        if self.d0 == 0 || self.embed_dim < 2 {
            return Err(SynthError::Config("feature and embedding dims must be positive".into()));
        }
        if !(self.activation_cutoff > -1.0 && self.activation_cutoff < 1.0) {
            return Err(SynthError::Config("activation cutoff outside (-1, 1)".into()));
        }
        Ok(())
    }
}

/// Generator bundle with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub bundle: DatasetBundle,
    pub config: SynthConfig,
    /// `d0 × M*`.
    pub dictionary: Array2<f64>,
    /// `d_z × M*`.
    pub class_map: Array2<f64>,
    /// Concept-list position of planted concept `k`.
    pub planted: Vec<usize>,
    pub absent: Vec<usize>,
    pub unlearnable: Vec<usize>,
    /// `N × M*` codes behind each split.
    pub train_codes: Array2<f64>,
    pub val_codes: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct Truth {
    config: SynthConfig,
    planted: Vec<usize>,
    absent: Vec<usize>,
    unlearnable: Vec<usize>,
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Latent structure shared by every split: which latents belong to which
/// class, the dictionary and the class map.
pub(crate) struct Latents {
    pub signatures: Vec<Vec<usize>>,
    pub dictionary: Array2<f64>,
    pub class_map: Array2<f64>,
}

impl Latents {
    pub fn new(rng: &mut ChaCha8Rng, latents: usize, classes: usize, d0: usize) -> Self {
        let mut ids: Vec<usize> = (0..latents).collect();
        ids.shuffle(rng);
        let mut signatures = vec![Vec::new(); classes];
        for (i, id) in ids.into_iter().enumerate() {
            signatures[i % classes].push(id);
        }
        let mut class_map = Array2::zeros((classes, latents));
        for (k, sig) in signatures.iter().enumerate() {
            for &j in sig {
                class_map[[k, j]] = 1.0;
            }
        }
        let dictionary = Array2::from_shape_simple_fn((d0, latents), || normal(rng));
        Self {
            signatures,
            dictionary,
            class_map,
        }
    }

    /// One code with 3 to 6 active latents, mostly drawn from a random
    /// class's signature.
    pub fn code(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let latents = self.class_map.ncols();
        let mut c = Array1::zeros(latents);
        let k = rng.random_range(0..self.signatures.len());
        let sig = &self.signatures[k];
        let n_sig = rng.random_range(3..=4).min(sig.len());
        for &j in sig.choose_multiple(rng, n_sig) {
            c[j] = rng.random_range(0.5..1.5);
        }
        let n_extra = rng.random_range((3 - n_sig.min(3))..=2).min(latents - n_sig);
        let mut placed = 0;
        while placed < n_extra {
            let j = rng.random_range(0..latents);
            if c[j] == 0.0 {
                c[j] = rng.random_range(0.5..1.5);
                placed += 1;
            }
        }
        c
    }

    /// Codes, features `A c + σ ε` and labels `argmax(G c + σ/10 ε)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        let latents = self.class_map.ncols();
        let d0 = self.dictionary.nrows();
        let mut codes = Array2::zeros((n, latents));
        let mut feats = Array2::zeros((n, d0));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = self.code(rng);
            let f = self.dictionary.dot(&c);
            for (t, v) in feats.row_mut(i).iter_mut().zip(f.iter()) {
                *t = v + sigma * normal(rng);
            }
            let scores: Vec<f64> = self
                .class_map
                .dot(&c)
                .iter()
                .map(|s| s + 0.1 * sigma * normal(rng))
                .collect();
            labels.push(crate::head::argmax(&scores));
            codes.row_mut(i).assign(&c);
        }
        (codes, feats, labels)
    }
}

/// CLIP-like activation `0.2 + 0.1 (presence + σ ε)`, clipped to [-1, 1].
pub(crate) fn activation(presence: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f32 {
    (0.2 + 0.1 * (presence + sigma * normal(rng))).clamp(-1.0, 1.0) as f32
}

/// Random unit vectors, one per row.
pub(crate) fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_simple_fn((rows, dim), || normal(rng));
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    a
}

fn to_tensor(a: &Array2<f64>) -> Tensor {
    Tensor::from_array(a).expect("generator output is finite")
}

pub fn generate_planted(config: &SynthConfig) -> Result<SyntheticBundle, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latents = Latents::new(&mut rng, config.m_star, config.d_z, config.d0);
    let (train_codes, train_x, train_y) = latents.sample(&mut rng, config.n_train, config.sigma);
    let (val_codes, val_x, val_y) = latents.sample(&mut rng, config.n_val, config.sigma);

    // concept list positions: planted, absent, unlearnable, shuffled
    let m = config.m_star + config.absent + config.unlearnable;
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(&mut rng);
    let planted = slots[..config.m_star].to_vec();
    let absent = slots[config.m_star..config.m_star + config.absent].to_vec();
    let unlearnable = slots[config.m_star + config.absent..].to_vec();

    let make_p = |codes: &Array2<f64>, rng: &mut ChaCha8Rng| {
        let n = codes.nrows();
        let mut p = Array2::<f32>::zeros((n, m));
        for i in 0..n {
            for (k, &j) in planted.iter().enumerate() {
                p[[i, j]] = activation(codes[[i, k]], config.sigma, rng);
            }
            for &j in &absent {
                p[[i, j]] = activation(0.0, config.sigma, rng);
            }
            for &j in &unlearnable {
                let on = rng.random_bool(0.12);
                let presence = if on { rng.random_range(0.5..1.5) } else { 0.0 };
                p[[i, j]] = activation(presence, config.sigma, rng);
            }
        }
        Tensor::new(n, m, p.into_raw_vec_and_offset().0).expect("finite activations")
    };
    let train_p = make_p(&train_codes, &mut rng);
    let val_p = make_p(&val_codes, &mut rng);

    let embeddings = ["text_a", "text_b"]
        .iter()
        .map(|name| EmbeddingSpace {
            name: name.to_string(),
            concepts: to_tensor(&unit_rows(&mut rng, m, config.embed_dim)),
            classes: to_tensor(&unit_rows(&mut rng, config.d_z, config.embed_dim)),
        })
        .collect();

    let bundle = DatasetBundle {
        name: format!("synthetic-seed{}", config.seed),
        activation_cutoff: config.activation_cutoff,
        train_features: to_tensor(&train_x),
        val_features: to_tensor(&val_x),
        train_p,
        val_p,
        train_labels: train_y,
        val_labels: val_y,
        class_names: (0..config.d_z).map(|k| format!("class_{k}")).collect(),
        concepts: ConceptSet::from_texts((0..m).map(|j| format!("concept_{j:02}"))),
        embeddings,
    };
    bundle.validate()?;
    Ok(SyntheticBundle {
        bundle,
        config: config.clone(),
        dictionary: latents.dictionary,
        class_map: latents.class_map,
        planted,
        absent,
        unlearnable,
        train_codes,
        val_codes,
    })
}

impl SyntheticBundle {
    /// Writes the manifest directory plus `truth.json`, `dictionary.npy`
    /// and `class_map.npy`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
        let dir = dir.as_ref();
        let manifest = write_bundle(dir, &self.bundle)?;
        npy::write_tensor(&to_tensor(&self.dictionary), dir.join("dictionary.npy"))?;
        npy::write_tensor(&to_tensor(&self.class_map), dir.join("class_map.npy"))?;
        let truth = Truth {
            config: self.config.clone(),
            planted: self.planted.clone(),
            absent: self.absent.clone(),
            unlearnable: self.unlearnable.clone(),
        };
        fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
        Ok(manifest)
    }

    /// Every distractor position.
    pub fn distractors(&self) -> Vec<usize> {
        let mut d = self.absent.clone();
        d.extend(&self.unlearnable);
        d.sort_unstable();
        d
    }
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
