use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mofg_core::eval::{bleu_n, cider, rouge_l, Smoothing, ROUGE_BETA};

const HYP: &str = "the image looks fake . the top left region has unnatural texture .";
const REF: &str = "the image looks fake . the middle left region has unnatural texture .";

fn sentence(c: &mut Criterion) {
    c.bench_function("bleu4_sentence", |b| {
        b.iter(|| bleu_n(black_box(HYP), &[black_box(REF)], 4, Smoothing::AddEpsilon))
    });
    c.bench_function("rouge_l_sentence", |b| b.iter(|| rouge_l(black_box(HYP), black_box(REF), ROUGE_BETA)));
}

fn corpus(c: &mut Criterion) {
    let pairs: Vec<(&str, &str)> = (0..400).map(|i| if i % 2 == 0 { (HYP, REF) } else { (REF, REF) }).collect();
    c.bench_function("cider_400_pairs", |b| b.iter(|| cider(black_box(&pairs), 4, None)));
}

criterion_group!(benches, sentence, corpus);
criterion_main!(benches);
