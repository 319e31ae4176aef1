use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use super::history::{Commit, Delivery, History};
use super::{CheckError, CheckResult};
use crate::condition::Instance;
use crate::partitioner::{detect_conflicts, ConflictKind, ConflictRecord, OperationClass};
use crate::store::{Database, Reply, RowRef, StmtResult};
use crate::trace::{OpId, ServerId};
use crate::value::Value;

/// Globals delivered at `p` before and after a local operation there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalOrderContext {
    pub server: ServerId,
    pub local: OpId,
    pub before: Vec<OpId>,
    pub after: Vec<OpId>,
}

pub fn local_contexts(h: &History) -> Vec<LocalOrderContext> {
    h.commits
        .iter()
        .filter(|c| c.class == OperationClass::Local)
        .map(|l| {
            let (before, after): (Vec<&Delivery>, Vec<&Delivery>) = h.deliveries[l.server]
                .iter()
                .partition(|d| d.commit_seq < l.commit_seq);
            LocalOrderContext {
                server: l.server,
                local: l.op,
                before: before.iter().map(|d| d.op).collect(),
                after: after.iter().map(|d| d.op).collect(),
            }
        })
        .collect()
}

fn arg_binder<'a>(first: &'a Commit, second: &'a Commit, h: &'a History) -> impl Fn(Instance, &str) -> Option<Value> + 'a {
    move |i, name| {
        let c = if i == Instance::First { first } else { second };
        let idx = h.template(&c.txn)?.param_index(name)?;
        c.args.get(idx).cloned()
    }
}

/// Could `reader` have read what `writer` wrote, given their arguments?
fn may_read_from(conflicts: &[ConflictRecord], h: &History, reader: &Commit, writer: &Commit) -> bool {
    conflicts.iter().any(|r| {
        let (first, second) = match r.kind {
            ConflictKind::LeftReadsRight if r.t == reader.txn && r.t2 == writer.txn => (reader, writer),
            ConflictKind::RightReadsLeft if r.t == writer.txn && r.t2 == reader.txn => (writer, reader),
            _ => return false,
        };
        r.condition.substitute(&arg_binder(first, second, h)).is_satisfiable()
    })
}

/// A global ordered after local `l` at `p` but executed elsewhere never
/// reads from `l`, and never writes a row `l` wrote.
pub fn local_fences(h: &History) -> CheckResult {
    let name = "local_fences";
    let conflicts = detect_conflicts(&h.templates);
    for ctx in local_contexts(h) {
        let l = h.commit(ctx.local).expect("local commit");
        let before: BTreeSet<OpId> = ctx.before.iter().copied().collect();
        if ctx.after.iter().any(|g| before.contains(g)) {
            return CheckResult::fail(name, format!("fences of {} overlap", l.op), vec![l.seq]);
        }
        let written: BTreeSet<&RowRef> = l.footprint.iter().collect();
        for g in &ctx.after {
            let Some(g) = h.commit(*g) else {
                continue;
            };
            if g.server == l.server {
                continue;
            }
            if may_read_from(&conflicts, h, g, l) {
                return CheckResult::fail(
                    name,
                    format!(
                        "global {} at server {} may read from local {} at server {}",
                        g.op, g.server, l.op, l.server
                    ),
                    vec![l.seq, g.seq],
                );
            }
            if let Some(r) = g.footprint.iter().find(|r| written.contains(r)) {
                return CheckResult::fail(
                    name,
                    format!("global {} and local {} both write {} {:?}", g.op, l.op, r.table, r.key),
                    vec![l.seq, g.seq],
                );
            }
        }
    }
    CheckResult::pass(name)
}

/// Operations each server orders, in commit order: its own commits and
/// the foreign updates it applied. Commutative operations are left out.
fn server_sequence(h: &History, p: ServerId) -> Vec<OpId> {
    let mut seq: Vec<(u64, OpId)> = h
        .commits
        .iter()
        .filter(|c| c.server == p && c.class != OperationClass::Commutative)
        .map(|c| (c.commit_seq, c.op))
        .collect();
    seq.extend(
        h.deliveries[p]
            .iter()
            .filter(|d| d.origin != p)
            .map(|d| (d.commit_seq, d.op)),
    );
    seq.sort();
    seq.dedup_by_key(|x| x.1);
    seq.into_iter().map(|x| x.1).collect()
}

/// A serial order of all committed operations. Globals follow the common
/// token order, each local sits between the globals its server delivered
/// before and after it, operations of one server keep their commit order,
/// and commutative operations go at their invocation time.
pub fn build_total_order(h: &History) -> Result<Vec<OpId>, CheckError> {
    let mut succ: BTreeMap<OpId, BTreeSet<OpId>> = BTreeMap::new();
    let mut indeg: BTreeMap<OpId, usize> = h.commits.iter().map(|c| (c.op, 0)).collect();
    let mut edge = |a: OpId, b: OpId, indeg: &mut BTreeMap<OpId, usize>| {
        if a != b && indeg.contains_key(&a) && indeg.contains_key(&b) && succ.entry(a).or_default().insert(b) {
            *indeg.get_mut(&b).expect("node") += 1;
        }
    };
    let globals: Vec<OpId> = h.broadcasts.iter().map(|b| b.op).collect();
    for p in 0..h.n {
        let seq = server_sequence(h, p);
        for w in seq.windows(2) {
            edge(w[0], w[1], &mut indeg);
        }
        // globals p has not delivered yet come after everything p did
        if let Some(&last) = seq.last() {
            let have: BTreeSet<OpId> = h.deliveries[p].iter().map(|d| d.op).collect();
            for &g in globals.iter().filter(|g| !have.contains(g)) {
                edge(last, g, &mut indeg);
            }
        }
    }
    let key = |op: OpId| -> (u64, OpId) {
        let c = h.commit(op).expect("node is a commit");
        let t = if c.class == OperationClass::Commutative {
            h.invoked_at.get(&op).copied().unwrap_or(c.t_us)
        } else {
            c.t_us
        };
        (t, op)
    };
    let mut ready: BinaryHeap<Reverse<(u64, OpId)>> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&op, _)| Reverse(key(op))).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(Reverse((_, op))) = ready.pop() {
        order.push(op);
        if let Some(next) = succ.get(&op) {
            for &b in next {
                let d = indeg.get_mut(&b).expect("node");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(key(b)));
                }
            }
        }
    }
    if order.len() < indeg.len() {
        let placed: BTreeSet<OpId> = order.iter().copied().collect();
        let stuck: Vec<OpId> = indeg.keys().filter(|op| !placed.contains(op)).copied().collect();
        return Err(CheckError::Cycle(stuck));
    }
    Ok(order)
}

fn canonical(r: &Reply) -> String {
    serde_json::to_string(r).expect("replies serialize")
}

/// Runs one operation on `db` the way a server would.
pub fn execute(h: &History, db: &mut Database, c: &Commit) -> Result<Reply, String> {
    let tpl = h.template(&c.txn).ok_or_else(|| format!("unknown transaction {}", c.txn))?;
    let stmts = tpl.bind(&c.args).map_err(|e| e.to_string())?;
    stmts
        .iter()
        .map(|s| db.execute(s).map_err(|e| e.to_string()))
        .collect::<Result<Vec<StmtResult>, _>>()
}

/// Rows whose value at `p` must agree with a serial execution: those
/// written only by operations executed at `p` and by global updates it
/// delivered.
pub fn owned_rows(h: &History, p: ServerId) -> BTreeSet<RowRef> {
    let delivered: BTreeSet<OpId> = h.deliveries[p].iter().map(|d| d.op).collect();
    let mut rows = BTreeSet::new();
    let mut foreign = BTreeSet::new();
    for c in &h.commits {
        let into = if c.server == p || delivered.contains(&c.op) { &mut rows } else { &mut foreign };
        into.extend(c.footprint.iter().cloned());
    }
    rows.retain(|r| !foreign.contains(r));
    rows
}

/// The first owned row where a server's final state differs from `serial`.
pub fn compare_finals(h: &History, serial: &Database) -> Option<(ServerId, RowRef)> {
    for (&p, db) in &h.finals {
        for r in owned_rows(h, p) {
            if db.row(&r) != serial.row(&r) {
                return Some((p, r));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub replies: CheckResult,
    pub final_state: CheckResult,
}

/// Executes `order` on one fresh store and compares replies and final
/// states with the trace.
pub fn replay_and_compare(h: &History, order: &[OpId]) -> ReplayOutcome {
    let mut db = h.initial.clone();
    for &op in order {
        let c = h.commit(op).expect("ordered op committed");
        let got = match execute(h, &mut db, c) {
            Ok(r) => r,
            Err(e) => {
                return ReplayOutcome {
                    replies: CheckResult::fail("serializability", format!("replaying {op} failed: {e}"), vec![c.seq]),
                    final_state: CheckResult::skipped("final_state", "replay did not finish"),
                }
            }
        };
        let (want, got) = (canonical(&c.reply), canonical(&got));
        if want != got {
            return ReplayOutcome {
                replies: CheckResult::fail(
                    "serializability",
                    format!("reply of {op} ({}) differs: recorded {want}, serial {got}", c.txn),
                    vec![c.seq],
                ),
                final_state: CheckResult::skipped("final_state", "replies already diverged"),
            };
        }
    }
    let final_state = if !h.complete || h.finals.len() < h.n {
        CheckResult::skipped("final_state", "run did not drain")
    } else if let Some((p, r)) = compare_finals(h, &db) {
        CheckResult::fail(
            "final_state",
            format!("server {p} holds a different {} row {:?} than the serial run", r.table, r.key),
            vec![],
        )
    } else {
        CheckResult::pass("final_state")
    };
    ReplayOutcome {
        replies: CheckResult::pass("serializability"),
        final_state,
    }
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Searches every order that keeps each server's execution order for one
/// whose serial replay matches replies and final states.
pub fn brute_force_serializability(h: &History) -> Result<CheckResult, CheckError> {
    let n_ops = h.commits.len();
    if n_ops > BRUTE_FORCE_LIMIT {
        return Err(CheckError::TooLarge(n_ops));
    }
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n_ops];
    for (i, a) in h.commits.iter().enumerate() {
        for (j, b) in h.commits.iter().enumerate() {
            if a.server == b.server && a.commit_seq < b.commit_seq {
                preds[j].push(i);
            }
        }
    }
    let check_finals = h.complete && h.finals.len() == h.n;
    let mut used = vec![false; n_ops];
    let found = search(h, &preds, &mut used, h.initial.clone(), 0, check_finals);
    Ok(if found {
        CheckResult::pass("brute_force")
    } else {
        CheckResult::fail("brute_force", "no serial order reproduces the recorded replies and state".into(), vec![])
    })
}

fn search(h: &History, preds: &[Vec<usize>], used: &mut [bool], db: Database, depth: usize, finals: bool) -> bool {
    if depth == used.len() {
        return !finals || compare_finals(h, &db).is_none();
    }
    for i in 0..used.len() {
        if used[i] || preds[i].iter().any(|&p| !used[p]) {
            continue;
        }
        let c = &h.commits[i];
        let mut next = db.clone();
        match execute(h, &mut next, c) {
            Ok(r) if canonical(&r) == canonical(&c.reply) => {}
            _ => continue,
        }
        used[i] = true;
        let ok = search(h, preds, used, next, depth + 1, finals);
        used[i] = false;
        if ok {
            return true;
        }
    }
    false
}
