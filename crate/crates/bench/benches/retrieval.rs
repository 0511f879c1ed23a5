//! Hamming search and metric evaluation over packed codes.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tzsh_core::retrieval::{self, CodeIndex};
use tzsh_core::Tensor2;

fn random_index(n: usize, bits: usize, classes: usize, seed: u64) -> CodeIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Tensor2::zeros(n, bits);
    for i in 0..n {
        for j in 0..bits {
            h.set(i, j, rng.gen_range(-1.0..1.0));
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    retrieval::binarize(&h).with_labels(labels).unwrap()
}

fn bench_hamming(c: &mut Criterion) {
    let mut group = c.benchmark_group("hamming");
    for bits in [32usize, 64, 128] {
        let db = random_index(10_000, bits, 10, 1);
        let q = random_index(1, bits, 10, 2);
        group.bench_with_input(BenchmarkId::new("scan_10k", bits), &bits, |b, _| {
            b.iter(|| {
                let mut acc = 0usize;
                for j in 0..db.len() {
                    acc += q.distance(0, &db, j).unwrap();
                }
                black_box(acc)
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let queries = random_index(200, 32, 10, 3);
    let db = random_index(1_000, 32, 10, 4);
    c.bench_function("map_200x1000", |b| {
        b.iter(|| {
            black_box(
                retrieval::mean_average_precision(black_box(&queries), black_box(&db))
                    .unwrap()
                    .value,
            )
        })
    });
    c.bench_function("precision_at_2_200x1000", |b| {
        b.iter(|| {
            black_box(
                retrieval::precision_at_radius(black_box(&queries), black_box(&db), 2).unwrap(),
            )
        })
    });
}

criterion_group!(benches, bench_hamming, bench_metrics);
criterion_main!(benches);
