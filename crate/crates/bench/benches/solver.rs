use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use switchgrad::limits::{run_eps_limit, ContinuationSchedule};
use switchgrad::simulate::{estimate_value, SimConfig};
use switchgrad::{Grid, Method, NpdsConfig, NpdsSolver};
use switchgrad_bench::{bundled, policy_for};

fn npds_solve(c: &mut Criterion) {
    let inst = bundled("benchmark1d.cfg");
    let mut group = c.benchmark_group("npds_solve");
    for n in [101, 201, 401] {
        let grid = Grid::uniform(&inst.spec.domain, n).unwrap();
        let solver = NpdsSolver::new(&inst.spec, &grid).unwrap();
        for method in [Method::Newton, Method::Picard] {
            let cfg = NpdsConfig::new(0.1, 0.1).with_method(method);
            group.bench_with_input(
                BenchmarkId::new(format!("{method:?}"), n),
                &cfg,
                |b, cfg| b.iter(|| solver.solve(cfg).unwrap()),
            );
        }
    }
    group.finish();
}

fn eps_limit(c: &mut Criterion) {
    let inst = bundled("switching1d.cfg");
    let grid = Grid::uniform(&inst.spec.domain, 201).unwrap();
    let solver = NpdsSolver::new(&inst.spec, &grid).unwrap();
    let schedule = ContinuationSchedule::default();
    let mut group = c.benchmark_group("eps_limit");
    group.sample_size(10);
    group.bench_function("switching1d_201", |b| {
        b.iter(|| run_eps_limit(&solver, &schedule).unwrap())
    });
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let inst = bundled("benchmark1d.cfg");
    let policy = policy_for(&inst, 201, 0.1, 0.1);
    let start = inst.start_point();
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    for dt in [1e-2, 1e-3] {
        let cfg = SimConfig::new(dt, 1000, 1, 0.1);
        group.bench_with_input(BenchmarkId::new("paths_1000", dt), &cfg, |b, cfg| {
            b.iter(|| estimate_value(&inst.spec, &policy, cfg, &start).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, npds_solve, eps_limit, monte_carlo);
criterion_main!(benches);
