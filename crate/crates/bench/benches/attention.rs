use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use defxattn::attention::{cross_attention, expanded_window_ca, Mechanism};
use defxattn::network::{model_forward, ModelConfig};
use defxattn::pipeline::RunConfig;
use defxattn::Tape;
use defxattn_bench::{model_fixture, BlockFixture};

fn windowed(c: &mut Criterion) {
    let mut g = c.benchmark_group("cross_attention_8x8x8");
    let fx = BlockFixture::new([8, 8, 8], [2, 2, 2], 16, 2);
    for (name, mech) in [
        ("fixed_window", Mechanism::FixedWindow),
        ("dw_mca", Mechanism::Deformable),
    ] {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bind = tape.bind(&fx.store);
                let vb = tape.constant(fx.base.tensor().clone());
                let vr = tape.constant(fx.reference.tensor().clone());
                let out = cross_attention(&mut tape, &bind, &fx.params, vb, vr, &fx.layout, mech, None).unwrap();
                black_box(tape.value(out)[0])
            })
        });
    }
    g.bench_function(BenchmarkId::from_parameter("expanded_window"), |b| {
        b.iter(|| {
            let out =
                expanded_window_ca(&fx.store, &fx.params, &fx.base, &fx.reference, &fx.layout, [3, 3, 3]).unwrap();
            black_box(out)
        })
    });
    g.finish();
}

fn model(c: &mut Criterion) {
    let cfg: ModelConfig = RunConfig::desk().model;
    let (store, m, f) = model_fixture(&cfg);
    c.bench_function("model_forward_desk_16", |b| {
        b.iter(|| black_box(model_forward(&store, &cfg, &m, &f).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = windowed, model
}
criterion_main!(benches);
