use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umbc::estimator::estimate_gradients;
use umbc::{Activation, EstimatorKind, MixtureNll, StepOptions};
use umbc_bench::{points, slot_model};

/// One gradient estimate per regime. The unbiased step records a fixed
/// number of chunks whatever the set size; the full step records all of them.
fn gradient_step(c: &mut Criterion) {
    let mut model = slot_model(4, Activation::Softmax);
    let mut group = c.benchmark_group("gradient_step");
    group.sample_size(20);
    for n in [256, 1024, 4096] {
        let x = points(n, n as u64);
        for estimator in [EstimatorKind::Unbiased, EstimatorKind::Full] {
            let opts = StepOptions {
                estimator,
                chunk_size: 8,
                grad_subsets: 1,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            group.bench_function(BenchmarkId::new(estimator.name(), n), |b| {
                b.iter(|| estimate_gradients(&model.stack, &mut model.store, &[black_box(&x)], &MixtureNll, &opts, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, gradient_step);
criterion_main!(benches);
