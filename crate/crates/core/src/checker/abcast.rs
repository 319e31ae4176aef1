use std::collections::{BTreeMap, BTreeSet};

use super::history::{Delivery, History};
use super::CheckResult;
use crate::trace::{OpId, ServerId};

fn delivered_set(d: &[Delivery]) -> BTreeSet<OpId> {
    d.iter().map(|x| x.op).collect()
}

/// Deliveries without repeats, keeping the first.
fn first_deliveries(d: &[Delivery]) -> Vec<Delivery> {
    let mut seen = BTreeSet::new();
    d.iter().filter(|x| seen.insert(x.op)).copied().collect()
}

/// Each update is delivered at most once per server, and only if some
/// server broadcast it.
pub fn integrity(h: &History) -> CheckResult {
    let name = "integrity";
    for (p, ds) in h.deliveries.iter().enumerate() {
        let mut seen: BTreeMap<OpId, u64> = BTreeMap::new();
        for d in ds {
            if let Some(prev) = seen.insert(d.op, d.seq) {
                return CheckResult::fail(name, format!("server {p} delivers {} twice", d.op), vec![prev, d.seq]);
            }
            match h.broadcast_of.get(&d.op).map(|&i| h.broadcasts[i]) {
                None => {
                    return CheckResult::fail(name, format!("server {p} delivers {} which was never broadcast", d.op), vec![d.seq])
                }
                Some(b) if b.origin != d.origin => {
                    return CheckResult::fail(
                        name,
                        format!("server {p} delivers {} from {} but {} broadcast it", d.op, d.origin, b.origin),
                        vec![b.seq, d.seq],
                    )
                }
                _ => {}
            }
        }
    }
    let mut seen = BTreeMap::new();
    for b in &h.broadcasts {
        if let Some(prev) = seen.insert(b.op, b.seq) {
            return CheckResult::fail(name, format!("{} broadcast twice", b.op), vec![prev, b.seq]);
        }
    }
    CheckResult::pass(name)
}

/// Updates delivered by two servers are delivered in the same order.
pub fn total_order(h: &History) -> CheckResult {
    let name = "total_order";
    let firsts: Vec<Vec<Delivery>> = h.deliveries.iter().map(|d| first_deliveries(d)).collect();
    for p in 0..h.n {
        for q in p + 1..h.n {
            let sp = delivered_set(&firsts[p]);
            let sq = delivered_set(&firsts[q]);
            let a: Vec<&Delivery> = firsts[p].iter().filter(|d| sq.contains(&d.op)).collect();
            let b: Vec<&Delivery> = firsts[q].iter().filter(|d| sp.contains(&d.op)).collect();
            if let Some(i) = (0..a.len()).find(|&i| a[i].op != b[i].op) {
                let (x, y) = (a[i].op, b[i].op);
                let y_at_p = a.iter().find(|d| d.op == y).expect("common update");
                let x_at_q = b.iter().find(|d| d.op == x).expect("common update");
                return CheckResult::fail(
                    name,
                    format!("server {p} delivers {x} before {y}; server {q} delivers {y} before {x}"),
                    vec![a[i].seq, y_at_p.seq, b[i].seq, x_at_q.seq],
                );
            }
        }
    }
    CheckResult::pass(name)
}

/// Delivered sets are nested; in a drained run every broadcast is
/// delivered everywhere.
pub fn agreement(h: &History) -> CheckResult {
    let name = "agreement";
    let sets: Vec<BTreeSet<OpId>> = h.deliveries.iter().map(|d| delivered_set(d)).collect();
    let seq_of = |p: ServerId, op: OpId| h.deliveries[p].iter().find(|d| d.op == op).map_or(0, |d| d.seq);
    for p in 0..h.n {
        for q in p + 1..h.n {
            let u = sets[p].difference(&sets[q]).next();
            let v = sets[q].difference(&sets[p]).next();
            if let (Some(&u), Some(&v)) = (u, v) {
                return CheckResult::fail(
                    name,
                    format!("server {p} delivers {u} but not {v}; server {q} delivers {v} but not {u}"),
                    vec![seq_of(p, u), seq_of(q, v)],
                );
            }
        }
    }
    if h.complete {
        for b in &h.broadcasts {
            if let Some(p) = (0..h.n).find(|&p| !sets[p].contains(&b.op)) {
                return CheckResult::fail(
                    name,
                    format!("server {p} never delivers {} broadcast by {}", b.op, b.origin),
                    vec![b.seq],
                );
            }
        }
    }
    CheckResult::pass(name)
}

/// Within one epoch, updates of the primary are delivered in broadcast
/// order and without gaps.
pub fn local_primary_order(h: &History) -> CheckResult {
    let name = "local_primary_order";
    let mut rank: BTreeMap<OpId, (ServerId, u64, usize)> = BTreeMap::new();
    let mut groups: BTreeMap<(ServerId, u64), Vec<OpId>> = BTreeMap::new();
    for b in &h.broadcasts {
        let g = groups.entry((b.origin, b.epoch)).or_default();
        rank.entry(b.op).or_insert((b.origin, b.epoch, g.len()));
        g.push(b.op);
    }
    for (p, ds) in h.deliveries.iter().enumerate() {
        let mut next: BTreeMap<(ServerId, u64), (usize, u64)> = BTreeMap::new();
        for d in first_deliveries(ds) {
            let Some(&(origin, epoch, r)) = rank.get(&d.op) else {
                continue;
            };
            let (expected, last_seq) = next.get(&(origin, epoch)).copied().unwrap_or((0, d.seq));
            if r != expected {
                let other = groups[&(origin, epoch)][expected.min(r)];
                let detail = if r > expected {
                    format!("server {p} delivers {} without first delivering {other} from the same epoch", d.op)
                } else {
                    format!("server {p} delivers {} out of broadcast order", d.op)
                };
                return CheckResult::fail(name, detail, vec![last_seq, d.seq]);
            }
            next.insert((origin, epoch), (r + 1, d.seq));
        }
    }
    CheckResult::pass(name)
}

/// Updates of earlier epochs are delivered before updates of later ones.
pub fn global_primary_order(h: &History) -> CheckResult {
    let name = "global_primary_order";
    let epoch: BTreeMap<OpId, u64> = h.broadcasts.iter().map(|b| (b.op, b.epoch)).collect();
    for (p, ds) in h.deliveries.iter().enumerate() {
        let mut last: Option<(u64, &Delivery)> = None;
        for d in ds {
            let Some(&e) = epoch.get(&d.op) else {
                continue;
            };
            if let Some((le, ld)) = last {
                if e < le {
                    return CheckResult::fail(
                        name,
                        format!(
                            "server {p} delivers {} (epoch {e}) after {} (epoch {le})",
                            d.op, ld.op
                        ),
                        vec![ld.seq, d.seq],
                    );
                }
            }
            last = Some((e, d));
        }
    }
    CheckResult::pass(name)
}

/// Before a server broadcasts in epoch `e`, it has delivered every update
/// from an earlier epoch that any server delivers.
pub fn primary_integrity(h: &History) -> CheckResult {
    let name = "primary_integrity";
    let delivered_anywhere: BTreeSet<OpId> = h.deliveries.iter().flatten().map(|d| d.op).collect();
    let mut earlier: Vec<(u64, OpId, u64)> = h
        .broadcasts
        .iter()
        .filter(|b| delivered_anywhere.contains(&b.op))
        .map(|b| (b.epoch, b.op, b.seq))
        .collect();
    earlier.sort();
    let epoch: BTreeMap<OpId, (ServerId, u64)> = h.broadcasts.iter().map(|b| (b.op, (b.origin, b.epoch))).collect();
    for (p, ds) in h.deliveries.iter().enumerate() {
        let mut seen = BTreeSet::new();
        let mut checked = BTreeSet::new();
        for d in ds {
            if let Some(&(origin, e)) = epoch.get(&d.op) {
                if origin == p && checked.insert(e) {
                    for &(ue, u, useq) in earlier.iter().take_while(|x| x.0 < e) {
                        if !seen.contains(&u) {
                            return CheckResult::fail(
                                name,
                                format!(
                                    "server {p} broadcasts {} in epoch {e} before delivering {u} from epoch {ue}",
                                    d.op
                                ),
                                vec![useq, d.seq],
                            );
                        }
                    }
                }
            }
            seen.insert(d.op);
        }
    }
    CheckResult::pass(name)
}

/// Any two servers' global orders share a prefix holding all the updates
/// both have delivered.
pub fn common_prefix(h: &History) -> CheckResult {
    let name = "common_prefix";
    let orders: Vec<Vec<Delivery>> = h.deliveries.iter().map(|d| first_deliveries(d)).collect();
    for p in 0..h.n {
        for q in p + 1..h.n {
            let sq = delivered_set(&orders[q]);
            let k = orders[p].iter().filter(|d| sq.contains(&d.op)).count();
            if let Some(i) = (0..k).find(|&i| orders[p][i].op != orders[q][i].op) {
                return CheckResult::fail(
                    name,
                    format!(
                        "servers {p} and {q} differ at position {i} ({} vs {}) within their {k} common updates",
                        orders[p][i].op, orders[q][i].op
                    ),
                    vec![orders[p][i].seq, orders[q][i].seq],
                );
            }
        }
    }
    CheckResult::pass(name)
}
