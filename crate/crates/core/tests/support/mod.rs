//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use conveyor::bundled;
use conveyor::checker::History;
use conveyor::condition::{Atom, Conjunction, Dnf, Instance, Term};
use conveyor::minisql::{parse_statement, parse_templates, Schema, Statement, TransactionTemplate};
use conveyor::partitioner::{ConflictKind, ConflictRecord, PartitioningArray};
use conveyor::protocol::Fault;
use conveyor::sim::{run, LatencyMatrix, RunOptions, RunOutput, Scenario, WorkloadSpec};
use conveyor::partitioner::OperationClass;
use conveyor::store::{Database, Engine, ExecOutcome, RowRef, StateUpdate, StmtResult, UpdateQueue};
use conveyor::trace::{EventKind, OpId, Response, Trace};
use conveyor::value::Value;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RANDOM_SCHEMA: &str = r#"
version = 1

[[table]]
name = "T1"
columns = ["ID", "A", "B"]
key = ["ID"]

[[table]]
name = "T2"
columns = ["ID", "C"]
key = ["ID"]

[[table]]
name = "T3"
columns = ["K1", "K2", "V"]
key = ["K1", "K2"]
"#;

const MENU: &[&str] = &[
    "SELECT A FROM T1 WHERE ID = $P",
    "UPDATE T1 SET A = A + 1 WHERE ID = $P",
    "SELECT C FROM T2 WHERE ID = $P",
    "UPDATE T2 SET C = 1 WHERE ID = $P",
    "INSERT INTO T3 (K1, K2, V) VALUES ($P, $Q, 1)",
    "SELECT V FROM T3 WHERE K1 = $P",
    "UPDATE T1 SET B = 0 WHERE A = $P",
    "SELECT B FROM T1 WHERE ID = $P",
    "UPDATE T3 SET V = V + 1 WHERE K1 = $P AND K2 = $Q",
    "DELETE FROM T2 WHERE ID = $P",
];

/// Template source of a random app with 3 or 4 transactions of two
/// parameters each.
pub fn random_app_source(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=4);
    let mut src = String::from("-- conveyor templates v1\n");
    for t in 0..n {
        let params = ["a", "b"];
        src.push_str(&format!("TXN t{t}(a, b) {{\n"));
        for _ in 0..rng.gen_range(1..=3) {
            let stmt = MENU.choose(&mut rng).expect("menu");
            let mut ps = params;
            ps.shuffle(&mut rng);
            src.push_str(&format!("    {};\n", stmt.replace("$P", ps[0]).replace("$Q", ps[1])));
        }
        src.push_str("}\n");
    }
    src
}

pub fn random_app(seed: u64) -> Vec<TransactionTemplate> {
    let schema = Schema::from_toml(RANDOM_SCHEMA).expect("schema");
    parse_templates(&random_app_source(seed))
        .expect("generated templates parse")
        .iter()
        .map(|t| t.derive_access_sets(&schema).expect("access sets"))
        .collect()
}

/// Equivalence classes of a clause, merged one atom at a time.
pub fn classes(c: &Conjunction) -> Vec<BTreeSet<Term>> {
    let mut out: Vec<BTreeSet<Term>> = Vec::new();
    for a in &c.atoms {
        let Atom::Eq(x, y) = a else { continue };
        let ix = out.iter().position(|s| s.contains(x));
        let iy = out.iter().position(|s| s.contains(y));
        match (ix, iy) {
            (Some(i), Some(j)) if i != j => {
                let moved = out[j].clone();
                out[i].extend(moved);
                out.remove(j);
            }
            (Some(_), Some(_)) => {}
            (Some(i), None) => {
                out[i].insert(y.clone());
            }
            (None, Some(j)) => {
                out[j].insert(x.clone());
            }
            (None, None) => out.push([x.clone(), y.clone()].into_iter().collect()),
        }
    }
    out
}

pub fn oracle_sat(c: &Conjunction) -> bool {
    classes(c)
        .iter()
        .all(|s| s.iter().filter(|t| matches!(t, Term::Const(_))).count() <= 1)
}

pub fn oracle_colocated(c: &Conjunction, k: &Term, k2: &Term) -> bool {
    classes(c)
        .iter()
        .any(|s| s.contains(k) && s.contains(k2) && s.iter().any(Term::is_attr))
}

/// The cost function recomputed from the raw records.
pub fn oracle_cost(p: &PartitioningArray, conflicts: &[ConflictRecord], templates: &[TransactionTemplate]) -> f64 {
    let weight = |n: &str| templates.iter().find(|t| t.name == n).map_or(1.0, |t| t.weight);
    let mut pairs: BTreeSet<(String, String)> = BTreeSet::new();
    for r in conflicts {
        let survives = r.condition.clauses.iter().any(|c| {
            oracle_sat(c)
                && !p.params(&r.t).iter().any(|k| {
                    p.params(&r.t2).iter().any(|k2| {
                        oracle_colocated(c, &Term::param_of(Instance::First, k), &Term::param_of(Instance::Second, k2))
                    })
                })
        });
        if !survives {
            continue;
        }
        let (a, b) = (r.t.clone(), r.t2.clone());
        match r.kind {
            ConflictKind::WriteWrite => {
                pairs.insert((a.clone(), b.clone()));
                pairs.insert((b, a));
            }
            ConflictKind::LeftReadsRight => {
                pairs.insert((a, b));
            }
            ConflictKind::RightReadsLeft => {
                pairs.insert((b, a));
            }
        }
    }
    pairs.iter().map(|(a, b)| weight(a) + weight(b)).sum()
}

/// Records not touching a transaction that is never in a reads-from
/// relation.
pub fn oracle_relevant(templates: &[TransactionTemplate], conflicts: &[ConflictRecord]) -> Vec<ConflictRecord> {
    let reading: BTreeSet<&str> = conflicts
        .iter()
        .filter(|r| r.kind != ConflictKind::WriteWrite)
        .flat_map(|r| [r.t.as_str(), r.t2.as_str()])
        .collect();
    let _ = templates;
    conflicts
        .iter()
        .filter(|r| reading.contains(r.t.as_str()) && reading.contains(r.t2.as_str()))
        .cloned()
        .collect()
}

/// Every array with at most one parameter per transaction.
pub fn all_arrays(templates: &[TransactionTemplate]) -> Vec<PartitioningArray> {
    let mut out = vec![PartitioningArray::default()];
    for t in templates {
        let mut next = Vec::new();
        for p in &out {
            let mut none = p.clone();
            none.set(&t.name, &[]);
            next.push(none);
            for param in &t.params {
                let mut q = p.clone();
                q.set(&t.name, &[param]);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

pub fn brute_force_min_cost(templates: &[TransactionTemplate], conflicts: &[ConflictRecord]) -> f64 {
    all_arrays(templates)
        .iter()
        .map(|p| oracle_cost(p, conflicts, templates))
        .fold(f64::INFINITY, f64::min)
}

/// Conflict records rebuilt by enumerating entry pairs. Keyed by
/// (t, t2, kind), each with its clauses as sorted atom lists.
pub fn oracle_conflicts(templates: &[TransactionTemplate]) -> BTreeMap<(String, String, ConflictKind), BTreeSet<Vec<Atom>>> {
    let tag = |d: &Dnf, i: Instance| -> Vec<Conjunction> { d.clauses.iter().map(|c| c.with_instance(i)).collect() };
    let mut out: BTreeMap<(String, String, ConflictKind), BTreeSet<Vec<Atom>>> = BTreeMap::new();
    for (i, a) in templates.iter().enumerate() {
        for b in &templates[i..] {
            let mut kinds = vec![
                (ConflictKind::WriteWrite, &a.write_set, &b.write_set),
                (ConflictKind::LeftReadsRight, &a.read_set, &b.write_set),
            ];
            if a.name != b.name {
                kinds.push((ConflictKind::RightReadsLeft, &a.write_set, &b.read_set));
            }
            for (kind, xs, ys) in kinds {
                for x in xs {
                    for y in ys {
                        if x.table != y.table || x.attributes.is_disjoint(&y.attributes) {
                            continue;
                        }
                        for cx in tag(&x.condition, Instance::First) {
                            for cy in tag(&y.condition, Instance::Second) {
                                let c = cx.and(&cy);
                                if oracle_sat(&c) {
                                    let mut atoms = c.atoms.clone();
                                    atoms.sort();
                                    out.entry((a.name.clone(), b.name.clone(), kind)).or_default().insert(atoms);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn table3() -> LatencyMatrix {
    LatencyMatrix::from_toml(bundled::LATENCY_TABLE3).expect("bundled latency")
}

/// The online store with tight domains so that carts and items collide.
pub fn ministore(ops: u64, seed: u64, fault: Fault) -> Scenario {
    let mut spec = WorkloadSpec::from_toml(bundled::MINISTORE_WORKLOAD).expect("bundled workload");
    spec.duration_ms = None;
    spec.warmup_ms = 0.0;
    spec.max_ops = Some(ops);
    spec.seed = seed;
    spec.fault = fault;
    Scenario::bundled(spec, table3()).expect("scenario")
}

pub fn drained(scn: &Scenario, n: usize) -> RunOutput {
    run(
        scn,
        RunOptions {
            n_servers: n,
            record_trace: true,
            drain: true,
        },
    )
    .expect("simulation runs")
}

pub fn ministore_trace(n: usize, ops: u64, seed: u64) -> Trace {
    let out = drained(&ministore(ops, seed, Fault::None), n);
    assert!(out.complete, "run drained");
    out.trace.expect("trace recorded")
}

/// A mini-store run small enough for exhaustive search, with few carts and
/// items so operations conflict.
pub fn tiny_ministore(seed: u64) -> Scenario {
    let mut scn = ministore(1 + seed % 6, seed, Fault::None);
    scn.spec.clients = 3;
    for (k, max) in [("c", 3), ("i", 2)] {
        if let Some(d) = scn.spec.domains.get_mut(k) {
            *d = conveyor::sim::Domain::Range { min: 1, max };
        }
    }
    scn
}

fn renumber(t: &mut Trace) {
    for (i, e) in t.events.iter_mut().enumerate() {
        e.seq = i as u64;
    }
}

/// Positions of the foreign deliveries in a trace, by server.
pub fn applied_positions(t: &Trace) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in t.events.iter().enumerate() {
        if let EventKind::UpdateApplied { server, .. } = e.kind {
            out.entry(server).or_default().push(i);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    Swap(usize, usize),
    Drop(usize),
    Duplicate(usize),
}

impl Mutation {
    /// The property the mutant breaks.
    pub fn property(self) -> &'static str {
        match self {
            Mutation::Swap(..) => "total_order",
            Mutation::Drop(_) => "agreement",
            Mutation::Duplicate(_) => "integrity",
        }
    }
}

/// Every swap of two deliveries at one server, every drop and every
/// duplicate of a delivery.
pub fn mutations(t: &Trace) -> Vec<Mutation> {
    let mut out = Vec::new();
    for pos in applied_positions(t).values() {
        for (a, &i) in pos.iter().enumerate() {
            for &j in &pos[a + 1..] {
                out.push(Mutation::Swap(i, j));
            }
            out.push(Mutation::Drop(i));
            out.push(Mutation::Duplicate(i));
        }
    }
    out
}

pub fn mutate(t: &Trace, m: Mutation) -> Trace {
    let mut t = t.clone();
    match m {
        Mutation::Swap(i, j) => {
            let seq_of = |k: &EventKind| match k {
                EventKind::UpdateApplied { commit_seq, .. } => *commit_seq,
                _ => unreachable!("delivery event"),
            };
            let (si, sj) = (seq_of(&t.events[i].kind), seq_of(&t.events[j].kind));
            for (idx, v) in [(i, sj), (j, si)] {
                if let EventKind::UpdateApplied { commit_seq, .. } = &mut t.events[idx].kind {
                    *commit_seq = v;
                }
            }
        }
        Mutation::Drop(i) => {
            t.events.remove(i);
        }
        Mutation::Duplicate(i) => {
            let e = t.events[i].clone();
            t.events.insert(i + 1, e);
        }
    }
    renumber(&mut t);
    t
}

/// Moves one foreign delivery at a server behind that server's next own
/// broadcast, so it starts an epoch with an update still pending.
pub fn primary_integrity_mutant(t: &Trace) -> Option<Trace> {
    let h = History::from_trace(t).ok()?;
    let epoch_of: BTreeMap<OpId, u64> = h.broadcasts.iter().map(|b| (b.op, b.epoch)).collect();
    for p in 0..h.n {
        let ds = &h.deliveries[p];
        for (i, d) in ds.iter().enumerate() {
            if d.origin == p {
                continue;
            }
            let e = epoch_of[&d.op];
            if !ds[i + 1..].iter().any(|x| x.origin == p && epoch_of[&x.op] > e) {
                continue;
            }
            let last = ds.last().map_or(0, |x| x.commit_seq);
            let mut out = t.clone();
            for ev in &mut out.events {
                if let EventKind::UpdateApplied { server, update, commit_seq, .. } = &mut ev.kind {
                    if *server == p && *update == d.op {
                        *commit_seq = last + 1;
                    }
                }
            }
            return Some(out);
        }
    }
    None
}

/// Two increments of one row at one server that both claim to have seen
/// the first increment's result.
pub fn non_serializable_trace() -> Trace {
    let mut spec = WorkloadSpec::from_toml(bundled::SYNTHETIC_WORKLOAD).expect("bundled workload");
    spec.duration_ms = None;
    spec.max_ops = Some(1);
    spec.clients = 1;
    let scn = Scenario::bundled(spec, LatencyMatrix::single_site(20.0)).expect("scenario");
    let real = drained(&scn, 1).trace.expect("trace");
    let tpl = scn.templates.iter().find(|t| t.name == "localOp").expect("localOp");
    let args = vec![Value::Int(7)];
    let stmts = tpl.bind(&args).expect("bind");
    let mut db = scn.initial_db().expect("initial");
    let reply: Vec<_> = stmts.iter().map(|s| db.execute(s).expect("execute")).collect();
    let update = StateUpdate {
        statements: stmts.iter().filter(|s| s.is_mutation()).cloned().collect(),
    };
    db.apply(&update).expect("second increment");
    let mut t = Trace::default();
    t.push(0, real.events[0].kind.clone());
    for op in 0..2u64 {
        let at = 1000 * (op + 1);
        t.push(at, EventKind::ReqSent { client: 0, op, txn: "localOp".into(), args: args.clone(), to: 0 });
        t.push(at, EventKind::ExecBegin { server: 0, op, attempt: 0 });
        t.push(
            at,
            EventKind::ExecCommit {
                server: 0,
                op,
                txn: "localOp".into(),
                args: args.clone(),
                class: OperationClass::Local,
                commit_seq: op + 1,
                epoch: None,
                reply: reply.clone(),
                update: update.clone(),
                footprint: vec![RowRef { table: "LROWS".into(), key: vec![Value::Int(7)] }],
            },
        );
        t.push(at, EventKind::RespReceived { client: 0, op, response: Response::Reply });
    }
    t.push(3000, EventKind::Final { server: 0, dump: db.dump() });
    t.push(3000, EventKind::End { complete: true });
    t
}

/// Checks a serial order against the token order, the local fences and
/// each server's commit order.
pub fn assert_order_constraints(h: &History, order: &[OpId]) {
    let pos: BTreeMap<OpId, usize> = order.iter().enumerate().map(|(i, o)| (*o, i)).collect();
    assert_eq!(pos.len(), h.commits.len(), "every commit placed once");
    let longest = (0..h.n).max_by_key(|&p| h.deliveries[p].len()).unwrap_or(0);
    let globals: Vec<usize> = h.deliveries.get(longest).into_iter().flatten().map(|d| pos[&d.op]).collect();
    assert!(globals.windows(2).all(|w| w[0] < w[1]), "globals follow the token order");
    for ctx in conveyor::checker::local_contexts(h) {
        let l = pos[&ctx.local];
        assert!(ctx.before.iter().all(|g| pos[g] < l), "{} after its preceding globals", ctx.local);
        assert!(ctx.after.iter().all(|g| pos[g] > l), "{} before its following globals", ctx.local);
    }
    for p in 0..h.n {
        let mut own: Vec<(u64, usize)> = h
            .commits
            .iter()
            .filter(|c| c.server == p && c.class != OperationClass::Commutative)
            .map(|c| (c.commit_seq, pos[&c.op]))
            .collect();
        own.sort();
        assert!(own.windows(2).all(|w| w[0].1 < w[1].1), "server {p} keeps its commit order");
    }
}

const ITEMS_SCHEMA: &str = r#"
version = 1
[[table]]
name = "ITEMS"
columns = ["ID", "STOCK"]
key = ["ID"]
"#;

/// ITEMS rows 1 to 3 with 100 in stock.
pub fn items_db() -> Database {
    let mut db = Database::new(Schema::from_toml(ITEMS_SCHEMA).unwrap());
    for id in 1..=3 {
        db.insert_row("ITEMS", vec![Value::Int(id), Value::Int(100)]).unwrap();
    }
    db
}

pub fn random_program(rng: &mut ChaCha8Rng) -> Vec<Statement> {
    (0..rng.gen_range(1..=3))
        .map(|_| {
            let k = rng.gen_range(1..=3);
            let src = match rng.gen_range(0..5) {
                0 => format!("UPDATE ITEMS SET STOCK = STOCK - 1 WHERE ID = {k}"),
                1 => format!("UPDATE ITEMS SET STOCK = STOCK + 2 WHERE ID = {k}"),
                2 => format!("SELECT STOCK FROM ITEMS WHERE ID = {k}"),
                3 => "SELECT STOCK FROM ITEMS WHERE STOCK > 0".to_string(),
                _ => format!("UPDATE ITEMS SET STOCK = {k} WHERE STOCK > 1000"),
            };
            parse_statement(&src).unwrap()
        })
        .collect()
}

pub struct Run {
    pub prog: Vec<Statement>,
    pub txn: u64,
    pub idx: usize,
    pub results: Vec<StmtResult>,
    pub commit_seq: Option<u64>,
}

/// Interleaves the programs at random until all commit. Returns the
/// engine, the queue and each program's committed results and sequence.
pub fn schedule(seed: u64) -> (Engine, UpdateQueue, Vec<Run>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engine = Engine::new(items_db());
    let mut queue = UpdateQueue::default();
    let mut runs: Vec<Run> = (0..rng.gen_range(2..=4))
        .map(|i| Run {
            prog: random_program(&mut rng),
            txn: engine.begin(&format!("p{i}")),
            idx: 0,
            results: vec![],
            commit_seq: None,
        })
        .collect();
    let mut steps = 0;
    while runs.iter().any(|r| r.commit_seq.is_none()) {
        steps += 1;
        assert!(steps < 10_000, "seed {seed}: schedule does not finish");
        let open: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].commit_seq.is_none()).collect();
        let i = open[rng.gen_range(0..open.len())];
        let r = &mut runs[i];
        if r.idx == r.prog.len() {
            let info = engine.commit(r.txn, Some(&mut queue)).unwrap();
            r.commit_seq = Some(info.commit_seq);
            continue;
        }
        match engine.exec(r.txn, &r.prog[r.idx]).unwrap() {
            ExecOutcome::Done(res) => {
                r.results.push(res);
                r.idx += 1;
            }
            ExecOutcome::Blocked => {}
            ExecOutcome::Aborted => {
                engine.forget(r.txn);
                r.txn = engine.begin(&format!("p{i}"));
                r.idx = 0;
                r.results.clear();
            }
        }
    }
    (engine, queue, runs)
}
