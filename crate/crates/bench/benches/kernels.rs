use condensery::Tape;
use condensery_bench::ramp;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(batch, ch) in &[(8usize, 32usize), (32, 32)] {
        let x = ramp(vec![batch, ch, 16, 16]);
        let k = ramp(vec![ch, ch, 3, 3]);
        let b = ramp(vec![ch]);
        group.bench_with_input(BenchmarkId::new("forward", format!("{batch}x{ch}")), &(), |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, kv, bv) = (t.leaf(&x, false), t.leaf(&k, false), t.leaf(&b, false));
                t.conv2d(xv, kv, bv, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("{batch}x{ch}")), &(), |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, kv, bv) = (t.leaf(&x, true), t.leaf(&k, true), t.leaf(&b, true));
                let y = t.conv2d(xv, kv, bv, 1, 1).unwrap();
                let s = t.sum_squares(y);
                t.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn norm_pool(c: &mut Criterion) {
    let x = ramp(vec![32, 32, 16, 16]);
    c.bench_function("instance_norm_relu_pool", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let v = t.leaf(&x, true);
            let n = t.instance_norm2d(v, 1e-5).unwrap();
            let r = t.relu(n);
            let p = t.avg_pool2d(r, 2, 2).unwrap();
            let s = t.sum_squares(p);
            t.backward(s).unwrap();
        })
    });
}

criterion_group!(benches, conv, norm_pool);
criterion_main!(benches);
