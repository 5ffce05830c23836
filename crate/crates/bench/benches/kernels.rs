use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lfcbm_core::cbl::{cbl_loss_grad, cos_cubed};
use lfcbm_core::head::{fit_head, FitOptions};
use lfcbm_core::npy::{decode_tensor, encode_tensor};
use lfcbm_core::Tensor;
use ndarray::Array2;

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn similarity(c: &mut Criterion) {
    let mut r = lcg(1);
    let q: Vec<f64> = (0..4096).map(|_| r()).collect();
    let p: Vec<f64> = (0..4096).map(|_| r()).collect();
    c.bench_function("cos_cubed/4096", |b| b.iter(|| cos_cubed(black_box(&q), black_box(&p)).unwrap()));

    let x = Array2::from_shape_simple_fn((512, 64), &mut r);
    let pm = Array2::from_shape_simple_fn((512, 50), &mut r);
    let w = Array2::from_shape_simple_fn((50, 64), &mut r);
    c.bench_function("cbl_loss_grad/512x64x50", |b| {
        b.iter(|| cbl_loss_grad(black_box(&w), x.view(), pm.view()).unwrap())
    });
}

fn head(c: &mut Criterion) {
    let mut r = lcg(2);
    let x = Array2::from_shape_simple_fn((1000, 50), &mut r);
    let labels: Vec<usize> = (0..1000).map(|i| usize::from(x[[i, 0]] + x[[i, 1]] > 0.0) + 2 * usize::from(x[[i, 2]] > 0.0)).collect();
    let names: Vec<String> = (0..4).map(|k| k.to_string()).collect();
    let opts = FitOptions {
        max_iter: 5000,
        tol: 1e-5,
    };
    let mut g = c.benchmark_group("fit_head");
    g.sample_size(10);
    g.bench_function("1000x50x4", |b| {
        b.iter(|| fit_head(x.view(), &labels, &names, 0.99, 5.0, &opts, None).unwrap())
    });
    g.finish();
}

fn npy(c: &mut Criterion) {
    let mut r = lcg(3);
    let t = Tensor::new(1000, 512, (0..512_000).map(|_| r() as f32).collect()).unwrap();
    let bytes = encode_tensor(&t);
    c.bench_function("npy/encode/1000x512", |b| b.iter(|| encode_tensor(black_box(&t))));
    c.bench_function("npy/decode/1000x512", |b| {
        b.iter_batched(|| bytes.clone(), |v| decode_tensor(&v).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group!(benches, similarity, head, npy);
criterion_main!(benches);
