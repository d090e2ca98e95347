use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wfc_core::nn::softmax_cross_entropy;
use wfc_core::{Activation, MlpParams};

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("mlp");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array2::from_shape_fn((128, 768), |_| rng.random::<f64>() - 0.5);
    let labels: Vec<usize> = (0..128).map(|i| i % 2).collect();
    for width in [64, 300] {
        let net = MlpParams::init(&[768, width, width, 2], Activation::Tanh, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", width), &width, |b, _| {
            b.iter(|| net.forward(black_box(x.view())).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", width), &width, |b, _| {
            b.iter(|| {
                let trace = net.forward(black_box(x.view())).unwrap();
                let (_, seed) = softmax_cross_entropy(trace.logits(), &labels).unwrap();
                net.backward(&trace, seed.view()).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
