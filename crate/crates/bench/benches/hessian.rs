use std::hint::black_box;

use bls_bench::Workload;
use bls_core::HessianStrategy;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn total_hessian(c: &mut Criterion) {
    let mut group = c.benchmark_group("total_hessian");
    group.sample_size(20);
    for m in [25, 50, 100, 200] {
        let w = Workload::new(m, 5, 11).expect("workload");
        for (name, strategy) in [
            ("fast", HessianStrategy::Fast),
            ("full", HessianStrategy::Full),
        ] {
            group.bench_with_input(BenchmarkId::new(name, m), &w, |b, w| {
                b.iter(|| black_box(w.hessian(strategy).expect("hessian")))
            });
        }
    }
    group.finish();
}

fn parameter_count(c: &mut Criterion) {
    let mut group = c.benchmark_group("total_hessian_params");
    group.sample_size(20);
    for n in [1, 5, 20] {
        let w = Workload::new(100, n, 11).expect("workload");
        group.bench_with_input(BenchmarkId::new("fast", n), &w, |b, w| {
            b.iter(|| black_box(w.hessian(HessianStrategy::Fast).expect("hessian")))
        });
    }
    group.finish();
}

criterion_group!(benches, total_hessian, parameter_count);
criterion_main!(benches);
