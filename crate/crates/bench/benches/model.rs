use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mofg_bench::fixture;
use mofg_core::data::IMAGE_QUESTION;
use mofg_core::model::generate_from_features;
use mofg_core::text::build_training_sequence;
use mofg_core::FusionStrategy;

fn encode(c: &mut Criterion) {
    let fx = fixture(FusionStrategy::Simof, 2);
    let img = &fx.data[1].image;
    c.bench_function("encode_both_streams", |bench| {
        bench.iter(|| fx.params.encode(black_box(img)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_grads");
    group.sample_size(20);
    for strategy in [FusionStrategy::GlobalOnly, FusionStrategy::Simof] {
        let fx = fixture(strategy, 2);
        let ex = &fx.data[1];
        let feats = fx.params.encode(&ex.image).unwrap();
        let sample = build_training_sequence(&ex.question, &ex.answer, &fx.vocab, fx.cfg.train.max_len).unwrap();
        group.bench_function(strategy.as_str(), |bench| {
            bench.iter(|| fx.params.sample_grads(black_box(&feats), black_box(&sample)).unwrap())
        });
    }
    group.finish();
}

fn greedy(c: &mut Criterion) {
    let fx = fixture(FusionStrategy::Simof, 2);
    let feats = fx.params.encode(&fx.data[1].image).unwrap();
    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    group.bench_function("simof_16_tokens", |bench| {
        bench.iter(|| generate_from_features(&feats, IMAGE_QUESTION, &fx.params, &fx.vocab, 16).unwrap())
    });
    group.finish();
}

criterion_group!(benches, encode, train_step, greedy);
criterion_main!(benches);
