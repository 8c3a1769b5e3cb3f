use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mofg_bench::random_matrix;
use mofg_core::fusion::{deinterleave, interleave};
use mofg_core::numerics::{masked_attention, BoolMatrix};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 192] {
        let a = random_matrix(n, 64, 1);
        let b = random_matrix(64, 256, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let n = 160;
    let q = random_matrix(n, 16, 3);
    let k = random_matrix(n, 16, 4);
    let v = random_matrix(n, 16, 5);
    let allowed = BoolMatrix::lower_triangular(n);
    c.bench_function("masked_attention_160", |bench| {
        bench.iter(|| masked_attention(&q, &k, &v, black_box(&allowed)).unwrap())
    });
}

fn fusion(c: &mut Criterion) {
    let glo = random_matrix(1024, 64, 6);
    let loc = random_matrix(1024, 64, 7);
    c.bench_function("interleave_1024", |bench| {
        bench.iter(|| interleave(black_box(&glo), black_box(&loc)).unwrap())
    });
    let fused = interleave(&glo, &loc).unwrap();
    c.bench_function("deinterleave_1024", |bench| {
        bench.iter(|| deinterleave(black_box(&fused)).unwrap())
    });
}

criterion_group!(benches, matmul, attention, fusion);
criterion_main!(benches);
