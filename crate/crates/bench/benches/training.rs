//! Hot-path benchmarks: model forward, one minimax adaptation step, and the
//! synthetic data generator. Sizes are kept small so a full run stays in the
//! seconds range on a single CPU core.

use criterion::{criterion_group, criterion_main, Criterion};

use mddlab_core::adaptation::{adapt_step, AdaptConfig};
use mddlab_core::data::{generate_synthetic_pair, DomainShiftSpec};
use mddlab_core::model::{build_model, UNetConfig};
use mddlab_core::nn::adam::Adam;
use mddlab_core::nn::Part;

fn tiny_config() -> UNetConfig {
    UNetConfig {
        base_width: 8,
        depth: 3,
        input_size: (32, 32),
        ..UNetConfig::default()
    }
}

fn bench_forward(c: &mut Criterion) {
    let model = build_model(tiny_config(), 7).unwrap();
    let pair = generate_synthetic_pair(1, 1, &DomainShiftSpec::desk_benchmark(7), 7, (32, 32)).unwrap();
    let x = pair.source.image_batch(&[0, 1, 2, 3]);
    c.bench_function("forward_scores_32x32_b4", |b| {
        b.iter(|| model.forward_scores(Part::Classifier, std::hint::black_box(&x)).unwrap())
    });
}

fn bench_adapt_step(c: &mut Criterion) {
    let mut model = build_model(tiny_config(), 7).unwrap();
    model.copy_head();
    let pair = generate_synthetic_pair(2, 2, &DomainShiftSpec::desk_benchmark(7), 7, (32, 32)).unwrap();
    let xs = pair.source.image_batch(&[0, 1, 2, 3]);
    let ys = pair.source.label_batch(&[0, 1, 2, 3]).unwrap();
    let xt = pair.target.image_batch(&[0, 1, 2, 3]);
    let cfg = AdaptConfig {
        batch_size: 4,
        ..AdaptConfig::default()
    };
    let mut opt = Adam::new(model.arena());
    let mut step = 0usize;
    c.bench_function("adapt_step_32x32_b4", |b| {
        b.iter(|| {
            let r = adapt_step(&mut model, &mut opt, &xs, &ys, &xt, &cfg, step).unwrap();
            step += 1;
            r
        })
    });
}

fn bench_synth(c: &mut Criterion) {
    let shift = DomainShiftSpec::desk_benchmark(7);
    c.bench_function("generate_synthetic_pair_2x2_64", |b| {
        b.iter(|| generate_synthetic_pair(2, 2, std::hint::black_box(&shift), 7, (64, 64)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_forward, bench_adapt_step, bench_synth
}
criterion_main!(benches);
