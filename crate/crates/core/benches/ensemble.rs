use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nsldp::par::{map_indexed_with, Execution};
use nsldp::rng::{stream_id, TAG_TRAJECTORY};
use nsldp::{ForcingSet, Model};

fn ensemble_energy(model: &Model, exec: Execution, members: usize, steps: usize) -> f64 {
    let w0 = model.spectral().zeros();
    let finals = map_indexed_with(exec, members, |j| {
        model
            .simulate_streaming(&w0, steps, 7, stream_id(TAG_TRAJECTORY, j as u64), |_, _| {})
            .expect("stable step")
            .coef_norm()
    });
    finals.iter().map(|e| e * e).sum::<f64>() / members as f64
}

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("ensemble");
    g.sample_size(10);
    for n in [4u32, 8] {
        let model = Model::new(n, 0.1, 1.0 / 32.0, ForcingSet::standard()).unwrap();
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            g.bench_with_input(BenchmarkId::new(label, n), &model, |b, m| b.iter(|| ensemble_energy(m, exec, 64, 32)));
        }
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
