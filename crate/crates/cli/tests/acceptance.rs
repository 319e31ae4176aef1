//! One PASS or FAIL line per acceptance criterion. Runs without the test
//! harness so the lines always reach the output.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeSet;
use std::fs;
use std::panic;
use std::time::{Duration, Instant};

use conveyor::bundled;
use conveyor::checker::{
    brute_force_serializability, build_total_order, check_history, check_trace, replay_and_compare, CheckOptions,
    History, BRUTE_FORCE_LIMIT,
};
use conveyor::condition::{Atom, Instance, Term};
use conveyor::minisql::{parse_templates, Schema};
use conveyor::partitioner::{
    cost, detect_conflicts, optimize_partitioning, ClassificationReport, ConflictKind, OperationClass,
    OptimizerConfig, PartitioningArray,
};
use conveyor::protocol::Fault;
use conveyor::sim::{find_saturation, run, RunOptions, Scenario, WorkloadSpec};
use conveyor_cli::main_with;
use support::*;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("{what} took {took:.1?}, limit {limit:?}"));
    }
    Ok(())
}

fn cli(args: &[&str]) -> i32 {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    main_with(std::iter::once("conveyor").chain(args.iter().copied()), &mut o, &mut e)
}

fn store_classification() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().to_str().unwrap();
    let start = Instant::now();
    let code = cli(&["partition", "--workload", "ministore", "--out", out]);
    within(start, Duration::from_secs(1), "partition")?;
    ensure!(code == 0, "exit code {code}");
    let text = fs::read_to_string(dir.path().join("report.json")).map_err(|e| e.to_string())?;
    let report: ClassificationReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(report.class_of("order") == Some(OperationClass::Global), "order is {:?}", report.class_of("order"));
    for t in ["createCart", "addToCart"] {
        let c = report.get(t).ok_or(format!("{t} missing"))?;
        ensure!(c.class == OperationClass::Local, "{t} is {}", c.class);
        ensure!(c.params == ["c"], "{t} partitioned by {:?}", c.params);
    }
    Ok(format!("order global, carts local by c, {:.0?}", start.elapsed()))
}

fn worked_example() -> Outcome {
    let schema = Schema::from_toml(
        "version = 1\n[[table]]\nname = \"SC\"\ncolumns = [\"ID\", \"I_ID\", \"QTY\"]\nkey = [\"ID\"]\n",
    )
    .map_err(|e| e.to_string())?;
    let ts: Vec<_> = parse_templates(
        "-- conveyor templates v1
TXN createCart(sid) {
    INSERT INTO SC (ID) VALUES (sid);
}
TXN doCart(sid, iid, qty) {
    UPDATE SC SET QTY = qty WHERE ID = sid AND I_ID = iid;
}
",
    )
    .map_err(|e| e.to_string())?
    .iter()
    .map(|t| t.derive_access_sets(&schema).unwrap())
    .collect();
    let conflicts = detect_conflicts(&ts);
    let ww: Vec<_> = conflicts
        .iter()
        .filter(|r| r.t == "createCart" && r.t2 == "doCart" && r.kind == ConflictKind::WriteWrite)
        .cloned()
        .collect();
    ensure!(ww.len() == 1, "{} createCart/doCart write-write records", ww.len());
    let clauses = &ww[0].condition.clauses;
    ensure!(clauses.len() == 1, "condition has {} clauses", clauses.len());
    let got: BTreeSet<Atom> = clauses[0].atoms.iter().cloned().collect();
    let want: BTreeSet<Atom> = [
        Atom::eq(Term::attr("SC", "ID"), Term::param_of(Instance::First, "sid")),
        Atom::eq(Term::attr("SC", "ID"), Term::param_of(Instance::Second, "sid")),
        Atom::eq(Term::attr("SC", "I_ID"), Term::param_of(Instance::Second, "iid")),
    ]
    .into_iter()
    .collect();
    ensure!(got == want, "condition is {}", clauses[0]);
    let mut p = PartitioningArray::default();
    p.set("createCart", &["sid"]);
    p.set("doCart", &["sid"]);
    let before = cost(&PartitioningArray::default(), &ww, &ts);
    let after = cost(&p, &ww, &ts);
    ensure!(before > 0.0 && after == 0.0, "cost {before} unpartitioned, {after} under sid");
    Ok(format!("condition {}, removed under P = {{sid, sid'}}", clauses[0]))
}

fn optimizer_optimality() -> Outcome {
    let start = Instant::now();
    for seed in 0..200 {
        let ts = random_app(seed);
        ensure!((3..=4).contains(&ts.len()), "app {seed} has {} templates", ts.len());
        let conflicts = detect_conflicts(&ts);
        let relevant = oracle_relevant(&ts, &conflicts);
        let p = optimize_partitioning(&ts, &conflicts, &OptimizerConfig::default()).map_err(|e| e.to_string())?;
        let got = oracle_cost(&p, &relevant, &ts);
        let best = brute_force_min_cost(&ts, &relevant);
        ensure!(got == best, "app {seed}: optimizer {got}, enumeration {best}");
    }
    within(start, Duration::from_secs(30), "200 apps")?;
    Ok(format!("200 apps at the enumerated minimum, {:.1?}", start.elapsed()))
}

fn serializability() -> Outcome {
    let start = Instant::now();
    for seed in 0..1000 {
        let t = ministore_trace(3, 200, seed);
        let h = History::from_trace(&t).map_err(|e| e.to_string())?;
        let order = build_total_order(&h).map_err(|e| format!("seed {seed}: {e}"))?;
        let r = replay_and_compare(&h, &order);
        ensure!(r.replies.pass && r.final_state.pass, "seed {seed}: replay disagrees");
        ensure!(!r.final_state.skipped, "seed {seed}: final state not compared");
    }
    let mut conflicting = 0;
    for seed in 0..500 {
        let out = drained(&tiny_ministore(seed), 3);
        let h = History::from_trace(&out.trace.unwrap()).map_err(|e| e.to_string())?;
        ensure!(h.commits.len() <= 8 && h.commits.len() <= BRUTE_FORCE_LIMIT, "tiny run {seed} is too big");
        let r = replay_and_compare(&h, &build_total_order(&h).map_err(|e| e.to_string())?);
        let brute = brute_force_serializability(&h).map_err(|e| e.to_string())?;
        ensure!(brute.pass == (r.replies.pass && r.final_state.pass), "tiny run {seed}: replay and search disagree");
        ensure!(brute.pass, "tiny run {seed} not serializable");
        if h.commits.iter().any(|c| c.txn == "order") && h.commits.len() >= 3 {
            conflicting += 1;
        }
    }
    within(start, Duration::from_secs(300), "serializability runs")?;
    Ok(format!(
        "1000 runs replay, 500 tiny runs agree with search ({conflicting} with orders), {:.1?}",
        start.elapsed()
    ))
}

fn po_abcast() -> Outcome {
    const PROPS: [&str; 6] = [
        "integrity",
        "total_order",
        "agreement",
        "local_primary_order",
        "global_primary_order",
        "primary_integrity",
    ];
    let mut nominal = 0;
    for n in [1, 2, 3, 5] {
        for seed in 0..50 {
            let t = ministore_trace(n, 150, seed);
            let v = check_history(&History::from_trace(&t).map_err(|e| e.to_string())?, CheckOptions::default());
            for p in PROPS {
                let c = v.check(p).ok_or(format!("no {p} check"))?;
                ensure!(c.pass, "{n} servers, seed {seed}: {p} fails: {:?}", c.detail);
            }
            nominal += 1;
        }
    }
    let small = (0..)
        .map(|seed| ministore_trace(3, 40, seed))
        .find(|t| History::from_trace(t).unwrap().broadcasts.len() == 6)
        .unwrap();
    let large = (0..)
        .map(|seed| ministore_trace(3, 120, seed))
        .find(|t| History::from_trace(t).unwrap().broadcasts.len() >= 20)
        .unwrap();
    let (mut total, mut caught) = (0, 0);
    for base in [&small, &large] {
        for m in mutations(base) {
            total += 1;
            let v = check_trace(&mutate(base, m), CheckOptions::default()).map_err(|e| e.to_string())?;
            if v.check(m.property()).is_some_and(|c| !c.pass) {
                caught += 1;
            }
        }
    }
    let bad = primary_integrity_mutant(&large).ok_or("no primary-integrity mutant")?;
    total += 1;
    let v = check_trace(&bad, CheckOptions::default()).map_err(|e| e.to_string())?;
    if v.check("primary_integrity").is_some_and(|c| !c.pass) {
        caught += 1;
    }
    ensure!(total >= 100, "only {total} mutants");
    ensure!(caught == total, "caught {caught} of {total} mutants");
    Ok(format!("{nominal} nominal runs pass, {caught}/{total} mutants caught"))
}

fn u_ordering() -> Outcome {
    for seed in 0..1000 {
        let (engine, queue, runs) = schedule(seed);
        let mut by_commit: Vec<usize> = (0..runs.len()).collect();
        by_commit.sort_by_key(|&i| runs[i].commit_seq);
        let committed: Vec<String> = by_commit.iter().map(|i| format!("p{i}")).collect();
        let mut it = committed.iter();
        for (label, _) in queue.entries() {
            ensure!(it.any(|w| w == label), "seed {seed}: queue out of commit order");
        }
        let mut replica = items_db();
        for (_, u) in queue.entries() {
            replica.apply(u).map_err(|e| e.to_string())?;
        }
        ensure!(replica.digest() == engine.db().digest(), "seed {seed}: replay digest differs");
    }
    Ok("1000 schedules: queue in commit order, replay matches digest".into())
}

fn latency_split() -> Outcome {
    let start = Instant::now();
    let mut spec = WorkloadSpec::from_toml(bundled::MINISTORE_WORKLOAD).map_err(|e| e.to_string())?;
    spec.clients = 5;
    spec.seed = 1;
    let scn = Scenario::bundled(spec, table3()).map_err(|e| e.to_string())?;
    let m = run(
        &scn,
        RunOptions {
            n_servers: 5,
            record_trace: false,
            drain: false,
        },
    )
    .map_err(|e| e.to_string())?
    .metrics;
    let local = m.row("local").ok_or("no local operations")?.mean_ms;
    let global = m.row("global").ok_or("no global operations")?.mean_ms;
    let intra = scn.latency.intra_site_ms;
    within(start, Duration::from_secs(60), "latency run")?;
    ensure!(global >= 2.0 * local, "global {global:.1} ms is under twice local {local:.1} ms");
    ensure!(local <= 2.0 * intra, "local {local:.1} ms exceeds twice the intra-site {intra} ms");
    Ok(format!("local {local:.1} ms, global {global:.1} ms ({:.2}x)", global / local))
}

fn saturation_trend() -> Outcome {
    let start = Instant::now();
    let spec = WorkloadSpec::from_toml(bundled::SYNTHETIC_WORKLOAD).map_err(|e| e.to_string())?;
    let scn = Scenario::bundled(spec, table3()).map_err(|e| e.to_string())?;
    let mut points = vec![];
    for r in [0.0, 0.3, 0.5, 0.7, 0.9] {
        let mut s = scn.clone();
        s.spec.local_ratio = Some(r);
        let sat = find_saturation(&s, 3, 2000.0, 1000).map_err(|e| e.to_string())?;
        points.push((r, sat.throughput));
    }
    within(start, Duration::from_secs(120), "sweep")?;
    let shown: Vec<String> = points.iter().map(|(r, t)| format!("{r}:{t:.0}")).collect();
    ensure!(points.windows(2).all(|w| w[1].1 >= w[0].1), "not monotone: {}", shown.join(" "));
    let gap = points[4].1 / points[1].1;
    ensure!(gap >= 3.0, "90% is {gap:.2}x the 30% point");
    Ok(format!("{} ops/s, 90%/30% = {gap:.1}x, {:.1?}", shown.join(" "), start.elapsed()))
}

fn excluded_comparison() -> Outcome {
    Ok("excluded: the throughput and latency comparison against a clustered DBMS needs the real deployment; \
        criteria 4 to 8 stand in for it"
        .into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (name, _) in bundled::WORKLOADS {
        let mut files = vec![];
        for k in 0..2 {
            let out = dir.path().join(format!("{name}{k}"));
            let code = cli(&[
                "simulate", "--workload", name, "--seed", "42", "--latency", "table3", "--out", out.to_str().unwrap(),
            ]);
            ensure!(code == 0, "{name}: exit {code}");
            let read = |f: &str| fs::read(out.join(f)).map_err(|e| e.to_string());
            files.push((read("trace.jsonl")?, read("metrics.csv")?));
        }
        ensure!(files[0] == files[1], "{name}: outputs differ");
    }
    // other seeds give other traces, so the comparison is not vacuous
    let a = drained(&ministore(100, 3, Fault::None), 3).trace.unwrap().to_jsonl();
    let b = drained(&ministore(100, 4, Fault::None), 3).trace.unwrap().to_jsonl();
    ensure!(a != b, "different seeds give the same trace");
    Ok("trace and metrics byte-identical on rerun for every bundled workload".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "online store classification", store_classification),
        (2, "cart conflict condition", worked_example),
        (3, "optimizer optimality", optimizer_optimality),
        (4, "serializability", serializability),
        (5, "primary-order atomic broadcast", po_abcast),
        (6, "update queue ordering", u_ordering),
        (7, "local and global latency", latency_split),
        (8, "saturation trend", saturation_trend),
        (9, "clustered DBMS comparison", excluded_comparison),
        (10, "determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let result = panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(msg) => println!("PASS {n} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n} {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
