use std::hint::black_box;

use conveyor::bundled;
use conveyor::partitioner::{detect_conflicts, optimize_partitioning, partition, OptimizerConfig};
use conveyor_bench::templates;
use criterion::{criterion_group, criterion_main, Criterion};

fn optimizer(c: &mut Criterion) {
    let cfg = OptimizerConfig::default();
    for b in bundled::ALL {
        let ts = templates(*b);
        let conflicts = detect_conflicts(&ts);
        c.bench_function(&format!("detect_conflicts/{}", b.name), |bench| {
            bench.iter(|| detect_conflicts(black_box(&ts)))
        });
        c.bench_function(&format!("optimize/{}", b.name), |bench| {
            bench.iter(|| optimize_partitioning(black_box(&ts), &conflicts, &cfg).unwrap())
        });
        c.bench_function(&format!("partition/{}", b.name), |bench| {
            bench.iter(|| partition(black_box(&ts), &cfg).unwrap())
        });
    }
}

criterion_group!(benches, optimizer);
criterion_main!(benches);
