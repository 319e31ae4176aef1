mod support;

use std::collections::{BTreeMap, BTreeSet};

use conveyor::bundled;
use conveyor::minisql::{parse_templates, Schema, TransactionTemplate};
use conveyor::partitioner::{
    classify, commutative_set, cost, detect_conflicts, optimize_partitioning, partition, OperationClass,
    OptimizerConfig, PartitioningArray,
};
use support::*;

fn load(schema: &str, templates: &str) -> Vec<TransactionTemplate> {
    let schema = Schema::from_toml(schema).unwrap();
    parse_templates(templates)
        .unwrap()
        .iter()
        .map(|t| t.derive_access_sets(&schema).unwrap())
        .collect()
}

#[test]
fn conflicts_match_entry_pair_enumeration() {
    for seed in 0..100 {
        let ts = random_app(seed);
        let got: BTreeMap<_, BTreeSet<_>> = detect_conflicts(&ts)
            .into_iter()
            .map(|r| {
                let clauses = r
                    .condition
                    .clauses
                    .iter()
                    .map(|c| {
                        let mut a = c.atoms.clone();
                        a.sort();
                        a
                    })
                    .collect();
                ((r.t, r.t2, r.kind), clauses)
            })
            .collect();
        assert_eq!(got, oracle_conflicts(&ts), "app {seed}:\n{}", random_app_source(seed));
    }
}

#[test]
fn cost_matches_recomputation() {
    for seed in 0..60 {
        let ts = random_app(seed);
        let conflicts = detect_conflicts(&ts);
        for p in all_arrays(&ts) {
            assert_eq!(cost(&p, &conflicts, &ts), oracle_cost(&p, &conflicts, &ts), "app {seed}, {p:?}");
        }
    }
}

#[test]
fn optimizer_reaches_the_enumerated_minimum() {
    let mut nontrivial = 0;
    for seed in 0..200 {
        let ts = random_app(seed);
        let conflicts = detect_conflicts(&ts);
        let relevant = oracle_relevant(&ts, &conflicts);
        let p = optimize_partitioning(&ts, &conflicts, &OptimizerConfig::default()).unwrap();
        let best = brute_force_min_cost(&ts, &relevant);
        assert_eq!(oracle_cost(&p, &relevant, &ts), best, "app {seed}:\n{}", random_app_source(seed));
        if oracle_cost(&PartitioningArray::default(), &relevant, &ts) > best {
            nontrivial += 1;
        }
    }
    // partitioning must matter in a good share of the generated apps
    assert!(nontrivial >= 50, "{nontrivial}");
}

#[test]
fn optimizer_is_deterministic() {
    for seed in 0..20 {
        let ts = random_app(seed);
        let c = detect_conflicts(&ts);
        let cfg = OptimizerConfig::default();
        assert_eq!(optimize_partitioning(&ts, &c, &cfg).unwrap(), optimize_partitioning(&ts, &c, &cfg).unwrap());
    }
}

#[test]
fn adding_a_record_never_lowers_cost() {
    for seed in 0..40 {
        let ts = random_app(seed);
        let conflicts = detect_conflicts(&ts);
        for p in all_arrays(&ts).iter().take(20) {
            for k in 0..conflicts.len() {
                let fewer: Vec<_> = conflicts.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, r)| r.clone()).collect();
                assert!(cost(p, &fewer, &ts) <= cost(p, &conflicts, &ts));
            }
        }
    }
}

#[test]
fn every_transaction_gets_one_class() {
    for seed in 0..50 {
        let ts = random_app(seed);
        let report = partition(&ts, &OptimizerConfig::default()).unwrap();
        assert_eq!(report.transactions.len(), ts.len());
        let comm = commutative_set(&ts, &report.conflicts);
        for t in &report.transactions {
            assert_eq!(t.class == OperationClass::Commutative, comm.contains(&t.name));
        }
    }
}

#[test]
fn online_store_split() {
    let ts = load(bundled::MINISTORE.schema, bundled::MINISTORE.templates);
    let report = partition(&ts, &OptimizerConfig::default()).unwrap();
    assert_eq!(report.class_of("order"), Some(OperationClass::Global));
    assert_eq!(report.class_of("createCart"), Some(OperationClass::Local));
    assert_eq!(report.class_of("addToCart"), Some(OperationClass::Local));
    assert_eq!(report.class_of("logVisit"), Some(OperationClass::Commutative));
    for t in ["createCart", "addToCart", "order"] {
        assert_eq!(report.get(t).unwrap().params, vec!["c".to_string()], "{t}");
    }
}

#[test]
fn worked_cart_example() {
    let schema = r#"
version = 1
[[table]]
name = "SC"
columns = ["ID", "I_ID", "QTY"]
key = ["ID"]
"#;
    let templates = "-- conveyor templates v1
TXN createCart(sid) {
    INSERT INTO SC (ID) VALUES (sid);
}
TXN doCart(sid, iid, qty) {
    UPDATE SC SET QTY = qty WHERE ID = sid AND I_ID = iid;
}
";
    let ts = load(schema, templates);
    let conflicts = detect_conflicts(&ts);
    let ww: Vec<_> = conflicts
        .iter()
        .filter(|r| r.t == "createCart" && r.t2 == "doCart" && r.kind == conveyor::partitioner::ConflictKind::WriteWrite)
        .collect();
    assert_eq!(ww.len(), 1);
    let mut p = PartitioningArray::default();
    p.set("createCart", &["sid"]);
    p.set("doCart", &["sid"]);
    let report = classify(&ts, &p, &conflicts);
    assert!(report.residual.iter().all(|r| !(r.t == "createCart" && r.t2 == "doCart")));
}
