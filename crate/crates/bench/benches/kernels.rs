use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tcri_bench::normal_matrix;
use tcri_core::kernels::{conditional_hsic, hsic_v, median_bandwidth, rbf_gram};

fn gram_and_hsic(c: &mut Criterion) {
    let mut group = c.benchmark_group("hsic");
    for n in [100, 400] {
        let x = normal_matrix(n, 32, 1);
        let y = normal_matrix(n, 32, 2);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        group.bench_with_input(BenchmarkId::new("gram", n), &x, |b, x| {
            b.iter(|| rbf_gram(black_box(x), 1.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("median_bandwidth", n), &x, |b, x| {
            b.iter(|| median_bandwidth(black_box(x)).unwrap())
        });
        let (kx, ky) = (rbf_gram(&x, 1.0).unwrap(), rbf_gram(&y, 1.0).unwrap());
        group.bench_function(BenchmarkId::new("hsic_v", n), |b| {
            b.iter(|| hsic_v(black_box(&kx), &ky).unwrap())
        });
        group.bench_function(BenchmarkId::new("conditional", n), |b| {
            b.iter(|| conditional_hsic(black_box(&x), &y, &labels, 2).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gram_and_hsic);
criterion_main!(benches);
