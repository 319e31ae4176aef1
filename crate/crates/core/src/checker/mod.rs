//! Offline verification of simulation traces.
//!
//! [`check_trace`] runs the atomic broadcast properties of the token, the
//! ordering obligations between global and local operations, and a serial
//! replay of the whole history. Each check is reported on its own with the
//! trace events that witness a violation.

mod abcast;
mod history;
mod serial;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abcast::{
    agreement, common_prefix, global_primary_order, integrity, local_primary_order, primary_integrity, total_order,
};
pub use history::{Broadcast, Commit, Delivery, History};
pub use serial::{
    brute_force_serializability, build_total_order, compare_finals, execute, local_contexts, local_fences,
    owned_rows, replay_and_compare, LocalOrderContext, ReplayOutcome, BRUTE_FORCE_LIMIT,
};

use crate::trace::{OpId, Trace};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("malformed trace at event {seq}: {msg}")]
    Malformed { seq: u64, msg: String },
    #[error("ordering constraints form a cycle through {0:?}")]
    Cycle(Vec<OpId>),
    #[error("{0} operations is too many for exhaustive search")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub skipped: bool,
    pub detail: Option<String>,
    /// Sequence numbers of the events that witness a failure.
    pub events: Vec<u64>,
}

impl CheckResult {
    pub fn pass(name: &str) -> Self {
        CheckResult {
            name: name.into(),
            pass: true,
            skipped: false,
            detail: None,
            events: vec![],
        }
    }

    pub fn fail(name: &str, detail: String, events: Vec<u64>) -> Self {
        CheckResult {
            name: name.into(),
            pass: false,
            skipped: false,
            detail: Some(detail),
            events,
        }
    }

    pub fn skipped(name: &str, why: &str) -> Self {
        CheckResult {
            name: name.into(),
            pass: true,
            skipped: true,
            detail: Some(why.into()),
            events: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub complete: bool,
    pub operations: usize,
    pub checks: Vec<CheckResult>,
}

impl Verdict {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckOptions {
    /// Also search all serial orders when the history is small enough.
    pub brute_force: bool,
}

/// All atomic broadcast properties, in a fixed order.
pub fn check_po_abcast(h: &History) -> Vec<CheckResult> {
    vec![
        integrity(h),
        total_order(h),
        agreement(h),
        local_primary_order(h),
        global_primary_order(h),
        primary_integrity(h),
    ]
}

pub fn check_history(h: &History, opts: CheckOptions) -> Verdict {
    let mut checks = check_po_abcast(h);
    checks.push(common_prefix(h));
    checks.push(local_fences(h));
    match build_total_order(h) {
        Ok(order) => {
            let out = replay_and_compare(h, &order);
            checks.push(out.replies);
            checks.push(out.final_state);
        }
        Err(e) => {
            checks.push(CheckResult::fail("serializability", e.to_string(), vec![]));
            checks.push(CheckResult::skipped("final_state", "no total order"));
        }
    }
    if opts.brute_force {
        checks.push(match brute_force_serializability(h) {
            Ok(r) => r,
            Err(e) => CheckResult::skipped("brute_force", &e.to_string()),
        });
    }
    Verdict {
        pass: checks.iter().all(|c| c.pass),
        complete: h.complete,
        operations: h.commits.len(),
        checks,
    }
}

pub fn check_trace(trace: &Trace, opts: CheckOptions) -> Result<Verdict, CheckError> {
    Ok(check_history(&History::from_trace(trace)?, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::protocol::Fault;
    use crate::sim::{run, LatencyMatrix, RunOptions, Scenario, WorkloadSpec};

    fn traced(n: usize, ops: u64, seed: u64, fault: Fault) -> Trace {
        let mut spec = WorkloadSpec::from_toml(bundled::MINISTORE_WORKLOAD).unwrap();
        spec.duration_ms = None;
        spec.max_ops = Some(ops);
        spec.seed = seed;
        spec.fault = fault;
        let scn = Scenario::bundled(spec, LatencyMatrix::from_toml(bundled::LATENCY_TABLE3).unwrap()).unwrap();
        run(
            &scn,
            RunOptions {
                n_servers: n,
                record_trace: true,
                drain: true,
            },
        )
        .unwrap()
        .trace
        .unwrap()
    }

    #[test]
    fn nominal_runs_pass() {
        for seed in 0..5 {
            let v = check_trace(&traced(3, 150, seed, Fault::None), CheckOptions::default()).unwrap();
            assert!(v.pass, "seed {seed}: {}", v.to_json());
            assert!(!v.check("final_state").unwrap().skipped);
        }
    }

    #[test]
    fn dropped_applies_are_caught() {
        let v = check_trace(&traced(3, 150, 1, Fault::DropApply), CheckOptions::default()).unwrap();
        assert!(!v.check("agreement").unwrap().pass, "{}", v.to_json());
        assert!(!v.pass);
    }

    #[test]
    fn reversed_applies_are_caught() {
        let v = check_trace(&traced(3, 300, 2, Fault::ReverseApply), CheckOptions::default()).unwrap();
        assert!(!v.check("total_order").unwrap().pass, "{}", v.to_json());
    }
}
