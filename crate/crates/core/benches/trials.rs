use affagg::estimators::AffineEstimator;
use affagg::par::Execution;
use affagg::qp::SolveOptions;
use affagg::simulation::{run_trials, NoiseModel, TrialSetup};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;

fn setup(n: usize, m: usize) -> TrialSetup {
    let ests: Vec<_> = (1..=m)
        .map(|j| AffineEstimator::scaled_identity(n, j as f64 / m as f64).unwrap())
        .collect();
    let f = DVector::from_fn(n, |i, _| (i as f64 * 0.1).sin() * 2f64.sqrt());
    TrialSetup::q_aggregation(ests, f, NoiseModel::gaussian(1.0).unwrap()).unwrap()
}

fn trials(c: &mut Criterion) {
    let s = setup(200, 20);
    let opts = SolveOptions::default();
    let mut group = c.benchmark_group("run_trials");
    group.sample_size(10);
    for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new(label, 500), &exec, |b, &exec| {
            b.iter(|| run_trials(&s, 500, 0, exec, &opts))
        });
    }
    group.finish();
}

criterion_group!(benches, trials);
criterion_main!(benches);
