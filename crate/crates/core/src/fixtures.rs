//! Shipped CIFAR-10 fixture: a 177-concept list for the published filter
//! walkthrough with deterministic stand-in embeddings and activations, so
//! each filter removes exactly the concepts the walkthrough names.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::concepts::ConceptSet;
use crate::manifest::{DatasetBundle, EmbeddingSpace};
use crate::synth::{activation, normal, unit_rows, Latents};
use crate::tensor::Tensor;

pub const CIFAR10_CONCEPTS: &str = include_str!("../fixtures/cifar10/concepts.txt");
pub const CIFAR10_CLASSES: &str = include_str!("../fixtures/cifar10/classes.txt");
pub const CIFAR10_ACTIVATION_CUTOFF: f64 = 0.25;

pub const LONG: [&str; 3] = [
    "white spots on the fur (in some cases)",
    "feline features (e.g., whiskers, ears)",
    "legs with two toes pointing forward and two toes pointing backwar",
];

/// `(concept, class)`.
pub const CLASS_SIMILAR: [(&str, &str); 10] = [
    ("a cat", "cat"),
    ("a deer", "deer"),
    ("a horse", "horse"),
    ("a plane", "airplane"),
    ("a car", "automobile"),
    ("car", "automobile"),
    ("cars", "automobile"),
    ("vehicle", "automobile"),
    ("animal", "dog"),
    ("truck driver", "truck"),
];

/// `(removed concept, concept it duplicates)`.
pub const DUPLICATES: [(&str, &str); 10] = [
    ("4 wheels", "four wheels"),
    ("a food bowl", "a bowl"),
    ("a furry, four-legged animal", "a large, four-legged mammal"),
    ("a gasoline station", "a gas station"),
    ("a large boxy body", "a large body"),
    ("a large, muscular body", "a large body"),
    ("a street", "a road"),
    ("a strong engine", "an engine"),
    ("large, bulging eyes", "large eyes"),
    ("the ocean", "the sea"),
];

pub const ABSENT: [&str; 7] = [
    "a bit",
    "a mechanic",
    "legs",
    "long legs",
    "passengers",
    "several seats inside",
    "windows all around",
];

pub const UNPROJECTABLE: [&str; 5] = ["a bed", "a coffee mug", "a crew", "a house", "a wheel"];

pub fn cifar10_concepts() -> Vec<String> {
    CIFAR10_CONCEPTS.lines().map(str::to_string).collect()
}

pub fn cifar10_classes() -> Vec<String> {
    CIFAR10_CLASSES.lines().map(str::to_string).collect()
}

/// Unit vector with cosine `cos` to the unit vector `anchor`.
fn near(anchor: &Array1<f64>, cos: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut r = Array1::from_shape_simple_fn(anchor.len(), || normal(rng));
    let proj = r.dot(anchor);
    r.scaled_add(-proj, anchor);
    let n = r.dot(&r).sqrt();
    r.mapv_inplace(|v| v / n);
    anchor * cos + r * (1.0 - cos * cos).sqrt()
}

fn tensor(a: &Array2<f64>) -> Tensor {
    Tensor::from_array(a).expect("finite fixture")
}

/// Full bundle for the fixture: 1000 train and 250 val samples over 30
/// latent factors. Regular concepts mix one to three factors, absent ones
/// never fire and unprojectable ones fire independently of the features.
pub fn cifar10_bundle(seed: u64) -> DatasetBundle {
    let concepts = cifar10_concepts();
    let classes = cifar10_classes();
    let (m, dz) = (concepts.len(), classes.len());
    let pos = |name: &str| concepts.iter().position(|c| c == name).expect("fixture concept");
    let class_pos = |name: &str| classes.iter().position(|c| c == name).expect("fixture class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dim = 128;
    let mut embeddings = Vec::new();
    for name in ["clip", "mpnet"] {
        let mut cvec = unit_rows(&mut rng, m, dim);
        let kvec = unit_rows(&mut rng, dz, dim);
        for (c, k) in CLASS_SIMILAR {
            let v = near(&kvec.row(class_pos(k)).to_owned(), 0.95, &mut rng);
            cvec.row_mut(pos(c)).assign(&v);
        }
        for (d, a) in DUPLICATES {
            let v = near(&cvec.row(pos(a)).to_owned(), 0.96, &mut rng);
            cvec.row_mut(pos(d)).assign(&v);
        }
        embeddings.push(EmbeddingSpace {
            name: name.to_string(),
            concepts: tensor(&cvec),
            classes: tensor(&kvec),
        });
    }

    let (r, d0, sigma) = (30, 48, 0.05);
    let latents = Latents::new(&mut rng, r, dz, d0);
    let mut mixing = Array2::<f64>::zeros((r, m));
    for j in 0..m {
        let k = rng.random_range(1..=3);
        for _ in 0..k {
            mixing[[rng.random_range(0..r), j]] = rng.random_range(0.5..1.5);
        }
    }
    let absent: Vec<usize> = ABSENT.iter().map(|c| pos(c)).collect();
    let unproj: Vec<usize> = UNPROJECTABLE.iter().map(|c| pos(c)).collect();

    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let (codes, x, y) = latents.sample(rng, n, sigma);
        let presence = codes.dot(&mixing);
        let mut p = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let v = if absent.contains(&j) {
                    0.0
                } else if unproj.contains(&j) {
                    if rng.random_bool(0.15) {
                        rng.random_range(0.5..1.5)
                    } else {
                        0.0
                    }
                } else {
                    presence[[i, j]]
                };
                p.push(activation(v, sigma, rng));
            }
        }
        (tensor(&x), Tensor::new(n, m, p).expect("finite"), y)
    };
    let (train_x, train_p, train_y) = split(1000, &mut rng);
    let (val_x, val_p, val_y) = split(250, &mut rng);

    DatasetBundle {
        name: "cifar10-fixture".into(),
        activation_cutoff: CIFAR10_ACTIVATION_CUTOFF,
        train_features: train_x,
        val_features: val_x,
        train_p,
        val_p,
        train_labels: train_y,
        val_labels: val_y,
        class_names: classes,
        concepts: ConceptSet::from_texts(concepts),
        embeddings,
    }
}
