use lfcbm_core::edit::{intervene, replay, EditRequest, EditSession};
use lfcbm_core::explain::explain_activations;
use lfcbm_core::pipeline::{train, PipelineConfig};
use lfcbm_core::{generate_planted, PathConfig, SparseHead, SynthConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

#[test]
fn top_explanations_name_active_planted_concepts() {
    let data = generate_planted(&SynthConfig::preset("small").unwrap()).unwrap();
    let cfg = PipelineConfig {
        path: PathConfig {
            fallback_band: Some((3.0, 8.0)),
            ..PathConfig::default()
        },
        ..PipelineConfig::default()
    };
    let run = train(&data.bundle, &cfg).unwrap();
    let texts = data.bundle.concepts.texts();
    let names = &run.cbl.concept_names;
    let (mut hits, mut total) = (0, 0);
    for i in 0..data.bundle.val_labels.len() {
        let a = run.val_activations.row(i).to_vec();
        let view = explain_activations(names, &run.head, &a, 3).unwrap();
        if view.class != data.bundle.val_labels[i] {
            continue;
        }
        total += 1;
        let hit = view.entries.iter().filter(|e| e.contribution > 0.0).any(|e| {
            data.planted
                .iter()
                .position(|&j| texts[j] == e.name)
                .is_some_and(|k| data.val_codes[[i, k]] > 0.0)
        });
        hits += hit as usize;
    }
    assert!(total > 0);
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

fn head_from(w: Vec<f64>, b: Vec<f64>, dz: usize, m: usize) -> SparseHead {
    SparseHead::new(
        Array2::from_shape_vec((dz, m), w).unwrap(),
        Array1::from(b),
        (0..dz).map(|k| format!("class{k}")).collect(),
        0.1,
        0.99,
    )
}

fn edit_case() -> impl Strategy<Value = (SparseHead, Vec<f64>, usize, usize, usize, f64)> {
    (2usize..6, 2usize..12).prop_flat_map(|(dz, m)| {
        (
            prop::collection::vec(-3.0..3.0f64, dz * m),
            prop::collection::vec(-1.0..1.0f64, dz),
            prop::collection::vec(prop_oneof![-2.0..-0.05f64, 0.05..2.0f64], m),
            0..dz,
            1..dz,
            0..m,
            0.0..3.0f64,
        )
            .prop_map(move |(w, b, a, gt, off, c, margin)| {
                (head_from(w, b, dz, m), a, gt, (gt + off) % dz, c, margin)
            })
    })
}

proptest! {
    #[test]
    fn edit_touches_one_weight_and_hits_margin((head, a, gt, pred, c, margin) in edit_case()) {
        let mut s = EditSession::new(head.clone());
        let req = EditRequest { gt, pred, concept: c, margin, input: None };
        let rec = s.apply(&a, &req).unwrap();
        let before = head.logits(&a).unwrap();
        let after = s.working().logits(&a).unwrap();
        prop_assert!((after[gt] - after[pred] - margin).abs() < 1e-9);
        for k in 0..head.num_classes() {
            if k != gt && k != pred {
                prop_assert_eq!(before[k], after[k]);
            }
        }
        let diff: Vec<_> = head.weights.indexed_iter()
            .filter(|&(ix, w)| s.working().weights[ix] != *w)
            .map(|(ix, _)| ix)
            .collect();
        prop_assert!(diff.iter().all(|&(k, j)| j == c && (k == gt || k == pred)));
        prop_assert_eq!(&replay(&head, s.records()).weights, &s.working().weights);
        s.revert(rec.id).unwrap();
        prop_assert_eq!(&s.working().weights, &head.weights);
    }

    #[test]
    fn intervention_shifts_logits_by_weight_column((head, a, _gt, _pred, c, v) in edit_case()) {
        let r = intervene(&head, &a, &[(c, v)]).unwrap();
        for k in 0..head.num_classes() {
            let want = r.logits_before[k] + head.weights[[k, c]] * (v - a[c]);
            prop_assert!((r.logits_after[k] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn corrupting_the_driving_concept_flips_the_prediction() {
    let head = head_from(vec![2.0, 0.0, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3], 3, 3);
    let a = [1.0, 0.8, 0.2];
    let r = intervene(&head, &a, &[]).unwrap();
    assert_eq!((r.before, r.after), (0, 0));
    let r = intervene(&head, &a, &[(0, -1.0)]).unwrap();
    assert_eq!(r.before, 0);
    assert_eq!(r.after, 1);
    assert!(intervene(&head, &a, &[(3, 0.0)]).is_err());
}
