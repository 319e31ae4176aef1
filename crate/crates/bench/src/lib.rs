//! Inputs shared by the benchmarks.

use conveyor::bundled::{self, Bundle};
use conveyor::minisql::TransactionTemplate;
use conveyor::sim::{LatencyMatrix, Scenario, WorkloadSpec};

pub fn templates(b: Bundle) -> Vec<TransactionTemplate> {
    b.load().expect("bundled templates parse").1
}

/// A bundled workload cut to `ops` operations on the five-site matrix.
pub fn scenario(name: &str, ops: u64) -> Scenario {
    let text = bundled::WORKLOADS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .expect("bundled workload");
    let mut spec = WorkloadSpec::from_toml(text).expect("workload parses");
    spec.duration_ms = None;
    spec.warmup_ms = 0.0;
    spec.max_ops = Some(ops);
    spec.seed = 1;
    let latency = LatencyMatrix::from_toml(bundled::LATENCY_TABLE3).expect("latency parses");
    Scenario::bundled(spec, latency).expect("scenario builds")
}
