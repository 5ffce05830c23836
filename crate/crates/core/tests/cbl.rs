use lfcbm_core::cbl::{cbl_loss, cbl_loss_grad, CblTrainConfig};
use lfcbm_core::concepts::{FilterConfig, FilterId};
use lfcbm_core::pipeline::{cbl_stage, filter_stage};
use lfcbm_core::oracle::finite_diff_grad;
use lfcbm_core::{generate_planted, SynthConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || rng.sample::<f64, _>(rand_distr::StandardNormal);
    let x = Array2::from_shape_simple_fn((40, 10), &mut normal);
    let p = Array2::from_shape_simple_fn((40, 5), &mut normal);
    let w = Array2::from_shape_simple_fn((5, 10), &mut normal);
    (x, p, w)
}

fn max_rel_error(eps: f64) -> f64 {
    let (x, p, w) = instance(5);
    let (_, g) = cbl_loss_grad(&w, x.view(), p.view()).unwrap();
    let fd = finite_diff_grad(|w| cbl_loss(w, x.view(), p.view()).unwrap(), &w, eps);
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    g.iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..10 {
        let (x, p, w) = instance(seed);
        let (loss, g) = cbl_loss_grad(&w, x.view(), p.view()).unwrap();
        approx::assert_relative_eq!(loss, cbl_loss(&w, x.view(), p.view()).unwrap(), max_relative = 1e-12);
        let fd = finite_diff_grad(|w| cbl_loss(w, x.view(), p.view()).unwrap(), &w, 1e-4);
        for (a, b) in g.iter().zip(fd.iter()) {
            approx::assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }
}

#[test]
fn step_size_sweep_is_v_shaped() {
    let errs: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-8, 1e-10, 1e-12]
        .iter()
        .map(|&e| max_rel_error(e))
        .collect();
    let (best, min) = errs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &e)| if e < acc.1 { (i, e) } else { acc });
    assert!(best > 0 && best < errs.len() - 1, "{errs:?}");
    assert!(min < 1e-7, "{errs:?}");
    assert!(errs[0] > 100.0 * min && errs[errs.len() - 1] > 100.0 * min, "{errs:?}");
}

#[test]
fn training_recovers_planted_and_drops_unlearnable() {
    let data = generate_planted(&SynthConfig::preset("small").unwrap()).unwrap();
    let (mut concepts, mut report) = filter_stage(&data.bundle, &FilterConfig::default()).unwrap();
    let (model, train) = cbl_stage(&data.bundle, &mut concepts, &mut report, &CblTrainConfig::default()).unwrap();
    let texts = data.bundle.concepts.texts();
    let dropped: Vec<&str> = train.dropped.iter().map(|d| d.name.as_str()).collect();
    for &j in &data.unlearnable {
        assert!(dropped.contains(&texts[j].as_str()), "{} kept", texts[j]);
    }
    for &j in &data.planted {
        assert!(model.concept_names.contains(&texts[j]), "{} dropped", texts[j]);
    }
    assert!(train.best_epoch <= train.epochs_run);
    assert_eq!(report.stage(FilterId::Fidelity).unwrap().after, model.num_concepts());
    assert_eq!(concepts.kept_count(), model.num_concepts());
}
