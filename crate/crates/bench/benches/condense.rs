use condensery::bilevel::{inner_step, outer_step, CondenseConfig, CondenseState};
use condensery::models::embed;
use condensery_bench::{blob_images, convnet};
use criterion::{criterion_group, criterion_main, Criterion};

fn steps(c: &mut Criterion) {
    let real = blob_images(64);
    let arch = convnet(32);
    let cfg = CondenseConfig {
        ipc: 1,
        real_per_class: 32,
        query_size: 50,
        ..Default::default()
    };
    let mut state = CondenseState::new(&real, &arch, &cfg).unwrap();
    let mut group = c.benchmark_group("bilevel");
    group.sample_size(10);
    group.bench_function("outer_step/convnet32/n32", |b| b.iter(|| outer_step(&mut state, &real, &cfg).unwrap()));
    group.bench_function("inner_step/convnet32/ipc1", |b| b.iter(|| inner_step(&mut state, &cfg).unwrap()));
    group.bench_function("embed/convnet32/640", |b| b.iter(|| embed(&state.theta, &real.images).unwrap()));
    group.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
