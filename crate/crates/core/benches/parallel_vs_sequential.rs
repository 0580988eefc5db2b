use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stoch_turnpike::dissipativity::{run_probes, ProbeSpec};
use stoch_turnpike::montecarlo::coupled_statistics;
use stoch_turnpike::ocp::solve_ocp;
use stoch_turnpike::stationary::certify;
use stoch_turnpike::{reference_problem, Execution, NoiseKind};

fn monte_carlo(c: &mut Criterion) {
    let spec = reference_problem(NoiseKind::Gaussian).with_horizon(40);
    let (pair, _) = certify(&spec).unwrap();
    let policy = solve_ocp(&spec).unwrap();
    let mut group = c.benchmark_group("coupled_statistics");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| coupled_statistics(&spec, &policy, &pair, 1, 20_000, &[0.1, 0.01], exec).unwrap())
        });
    }
    group.finish();
}

fn probes(c: &mut Criterion) {
    let spec = reference_problem(NoiseKind::Gaussian);
    let (pair, storage) = certify(&spec).unwrap();
    let probe = ProbeSpec::default();
    let mut group = c.benchmark_group("dissipativity_probes");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| run_probes(&spec, &pair, &storage, &probe, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, probes);
criterion_main!(benches);
