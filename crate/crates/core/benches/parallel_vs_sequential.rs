use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use condrand::assignment::DEFAULT_ENUMERATION_LIMIT;
use condrand::fisher::{fisher_exact_all, StatisticEvaluator, TieRule};
use condrand::par;
use condrand::simulation::{self, SimConfig};

fn pools() -> [(&'static str, Option<usize>); 2] {
    [("sequential", Some(1)), ("parallel", None)]
}

fn exact_ranks(c: &mut Criterion) {
    let sample = simulation::dgp_homogeneous(18, 1, false, 0.0, 3).unwrap();
    let eval = StatisticEvaluator::dm(sample.y0(), 9);
    let mut g = c.benchmark_group("fisher_exact_all_n18");
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::with_threads(threads, || fisher_exact_all(&eval, TieRule::Ordered, DEFAULT_ENUMERATION_LIMIT).unwrap())
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn grid(c: &mut Criterion) {
    let cfg = SimConfig::from_toml(
        r#"
mode = "grid"
n = 50
n1 = 25
k_grid = [2, 10]
replications = 16
assignments_per_sample = 200
estimators = ["DM", "OLS_Z", "PCA_P"]
emit_rows = false
"#,
    )
    .unwrap();
    let mut g = c.benchmark_group("grid_run");
    g.sample_size(10);
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || simulation::run(&cfg).unwrap()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, exact_ranks, grid);
criterion_main!(benches);
