use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lowrank_bn::exec::Execution;
use lowrank_bn::learn::{get_parents, LearnerConfig};
use lowrank_bn::markov_blanket::{estimate_moments, recover_blankets, MbOptions};
use lowrank_bn::network::BayesNet;
use lowrank_bn::oracle::{sample_observational, BlackBox, OracleConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn peeling(c: &mut Criterion) {
    let bn = BayesNet::random(14, 4, 0.02, 1).unwrap();
    let mut group = c.benchmark_group("get_parents_n14_exact");
    group.sample_size(10);
    for (name, execution) in MODES {
        let cfg = LearnerConfig {
            execution,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let bb = BlackBox::new(&bn, OracleConfig::exact()).unwrap();
                get_parents(&bb, &cfg, None).unwrap()
            })
        });
    }
    group.finish();
}

fn blankets(c: &mut Criterion) {
    let bn = BayesNet::random(20, 4, 0.02, 1).unwrap();
    let m = estimate_moments(&sample_observational(&bn, 5000, 1)).unwrap();
    let mut group = c.benchmark_group("recover_blankets_n20");
    for (name, execution) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| recover_blankets(&m, &MbOptions::default(), execution).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, peeling, blankets);
criterion_main!(benches);
