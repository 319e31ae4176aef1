use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::value::Value;

/// Multi-granularity lock modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LockMode {
    IS,
    IX,
    S,
    SIX,
    X,
}

impl LockMode {
    pub fn compatible(self, other: LockMode) -> bool {
        use LockMode::*;
        matches!(
            (self, other),
            (IS, IS | IX | S | SIX) | (IX, IS | IX) | (S, IS | S) | (SIX, IS)
        )
    }

    /// Least mode at least as strong as both.
    pub fn join(self, other: LockMode) -> LockMode {
        use LockMode::*;
        match (self, other) {
            (a, b) if a == b => a,
            (X, _) | (_, X) => X,
            (SIX, _) | (_, SIX) => SIX,
            (IX, S) | (S, IX) => SIX,
            (IS, m) | (m, IS) => m,
            _ => unreachable!("all pairs covered"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Table(String),
    Row(String, Vec<Value>),
}

#[derive(Debug, Default)]
struct Entry {
    holders: BTreeMap<u64, LockMode>,
    /// Arrival order of transactions waiting for this resource.
    queue: Vec<(u64, LockMode)>,
}

#[derive(Debug, Default)]
pub(crate) struct LockTable {
    entries: BTreeMap<Resource, Entry>,
    held: BTreeMap<u64, BTreeSet<Resource>>,
    waiting: BTreeMap<u64, Resource>,
}

impl LockTable {
    /// Grants the lock or queues the request. Returns whether it was granted.
    pub fn request(&mut self, txn: u64, res: &Resource, mode: LockMode) -> bool {
        let e = self.entries.entry(res.clone()).or_default();
        let held = e.holders.get(&txn).copied();
        let target = held.map_or(mode, |h| h.join(mode));
        if held == Some(target) {
            return true;
        }
        let others_ok = e
            .holders
            .iter()
            .all(|(&t, &m)| t == txn || m.compatible(target));
        // fresh requests queue behind earlier incompatible waiters
        let ahead_ok = held.is_some()
            || e
                .queue
                .iter()
                .take_while(|(t, _)| *t != txn)
                .all(|(_, m)| m.compatible(target));
        if others_ok && ahead_ok {
            e.queue.retain(|(t, _)| *t != txn);
            e.holders.insert(txn, target);
            self.held.entry(txn).or_default().insert(res.clone());
            self.waiting.remove(&txn);
            true
        } else {
            match e.queue.iter_mut().find(|(t, _)| *t == txn) {
                Some(slot) => slot.1 = target,
                None => e.queue.push((txn, target)),
            }
            self.waiting.insert(txn, res.clone());
            false
        }
    }

    /// Drops every lock and queued request of `txn`, then grants whatever
    /// the queues of the affected resources now allow.
    pub fn release_all(&mut self, txn: u64) {
        let mut touched = Vec::new();
        if let Some(res) = self.waiting.remove(&txn) {
            if let Some(e) = self.entries.get_mut(&res) {
                e.queue.retain(|(t, _)| *t != txn);
            }
            touched.push(res);
        }
        for res in self.held.remove(&txn).unwrap_or_default() {
            if let Some(e) = self.entries.get_mut(&res) {
                e.holders.remove(&txn);
            }
            touched.push(res);
        }
        for res in touched {
            self.promote(&res);
            if self.entries.get(&res).is_some_and(|e| e.holders.is_empty() && e.queue.is_empty()) {
                self.entries.remove(&res);
            }
        }
    }

    fn promote(&mut self, res: &Resource) {
        let Some(e) = self.entries.get_mut(res) else {
            return;
        };
        // modes of the requests still queued ahead of position i
        let mut ahead: Vec<LockMode> = Vec::new();
        let mut i = 0;
        while i < e.queue.len() {
            let (t, m) = e.queue[i];
            let others_ok = e.holders.iter().all(|(&h, &hm)| h == t || hm.compatible(m));
            let ahead_ok = e.holders.contains_key(&t) || ahead.iter().all(|a| a.compatible(m));
            if others_ok && ahead_ok {
                e.queue.remove(i);
                e.holders.insert(t, m);
                self.held.entry(t).or_default().insert(res.clone());
                self.waiting.remove(&t);
            } else {
                if !ahead.contains(&m) {
                    ahead.push(m);
                }
                i += 1;
            }
        }
    }

    #[cfg(test)]
    pub fn holds(&self, txn: u64, res: &Resource) -> Option<LockMode> {
        self.entries.get(res)?.holders.get(&txn).copied()
    }

    /// Edges `waiter -> blocker` of the current wait-for graph.
    #[cfg(test)]
    pub fn wait_for(&self) -> BTreeMap<u64, BTreeSet<u64>> {
        let mut g: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for (&w, res) in &self.waiting {
            let e = &self.entries[res];
            let Some(&(_, mode)) = e.queue.iter().find(|(t, _)| *t == w) else {
                continue;
            };
            let out = g.entry(w).or_default();
            for (&h, &m) in &e.holders {
                if h != w && !m.compatible(mode) {
                    out.insert(h);
                }
            }
            if !e.holders.contains_key(&w) {
                for &(t, m) in e.queue.iter().take_while(|(t, _)| *t != w) {
                    if !m.compatible(mode) {
                        out.insert(t);
                    }
                }
            }
        }
        g
    }

    /// Some cycle through `start` in the wait-for graph, as the path from
    /// `start` to the transaction that waits for it.
    pub fn cycle_from(&self, start: u64) -> Option<Vec<u64>> {
        let mut parent: BTreeMap<u64, u64> = BTreeMap::new();
        let mut seen = BTreeSet::from([start]);
        // queue prefix already scanned per resource and requested mode
        let mut scanned: BTreeMap<(&Resource, LockMode), usize> = BTreeMap::new();
        let mut stack = vec![start];
        let path_to = |w: u64, parent: &BTreeMap<u64, u64>| {
            let mut path = vec![w];
            while let Some(&p) = parent.get(path.last().expect("non-empty")) {
                path.push(p);
            }
            path.reverse();
            path
        };
        while let Some(w) = stack.pop() {
            let Some(res) = self.waiting.get(&w) else {
                continue;
            };
            let e = &self.entries[res];
            let Some(pos) = e.queue.iter().position(|(t, _)| *t == w) else {
                continue;
            };
            let mode = e.queue[pos].1;
            let blocks = |h: u64, m: LockMode| h != w && !m.compatible(mode);
            if e.holders.get(&start).is_some_and(|&m| blocks(start, m)) {
                return Some(path_to(w, &parent));
            }
            let mut next = Vec::new();
            let from = scanned.get(&(res, mode)).copied();
            if from.is_none() {
                next.extend(e.holders.iter().filter(|(&h, &m)| blocks(h, m)).map(|(&h, _)| h));
            }
            if !e.holders.contains_key(&w) {
                let from = from.unwrap_or(0).min(pos);
                next.extend(e.queue[from..pos].iter().filter(|(t, m)| blocks(*t, *m)).map(|(t, _)| *t));
            }
            let prev = from.unwrap_or(0);
            scanned.insert((res, mode), prev.max(pos));
            for n in next {
                if n == start {
                    return Some(path_to(w, &parent));
                }
                if seen.insert(n) {
                    parent.insert(n, w);
                    stack.push(n);
                }
            }
        }
        None
    }

    pub fn is_waiting(&self, txn: u64) -> bool {
        self.waiting.contains_key(&txn)
    }
}
