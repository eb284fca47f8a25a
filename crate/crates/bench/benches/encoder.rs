use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use voltcast_bench::random_input;
use voltcast_core::dat::DatModel;
use voltcast_core::eval::EncoderVariant;

fn encoder_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    for variant in [EncoderVariant::Full, EncoderVariant::Distilled] {
        for l in [128, 256, 512] {
            let model = DatModel::new(variant.config(l, 8), 1, 0, 7).unwrap();
            let x = random_input(l, 1, l as u64);
            group.bench_with_input(BenchmarkId::new(variant.name(), l), &x, |b, x| {
                b.iter(|| model.encode(x).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, encoder_scaling);
criterion_main!(benches);
