use std::collections::{BTreeMap, BTreeSet};

use super::CheckError;
use crate::minisql::{parse_templates, Schema, TransactionTemplate};
use crate::partitioner::{OperationClass, TxnClassification};
use crate::store::{Database, Reply, RowRef, StateUpdate};
use crate::trace::{EventKind, OpId, Response, ServerId, Trace};
use crate::value::Value;

/// A committed operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Commit {
    pub server: ServerId,
    pub op: OpId,
    pub txn: String,
    pub args: Vec<Value>,
    pub class: OperationClass,
    pub commit_seq: u64,
    pub epoch: Option<u64>,
    pub reply: Reply,
    pub update: StateUpdate,
    pub footprint: Vec<RowRef>,
    pub t_us: u64,
    /// Sequence number of the commit event.
    pub seq: u64,
}

/// An update joining the token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Broadcast {
    pub op: OpId,
    pub origin: ServerId,
    pub epoch: u64,
    pub seq: u64,
}

/// A global update taking effect at a server: an apply of a foreign entry,
/// or the origin's own commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub op: OpId,
    pub origin: ServerId,
    pub commit_seq: u64,
    pub seq: u64,
}

/// A trace digested into the views the checks need.
#[derive(Debug, Clone)]
pub struct History {
    pub n: usize,
    pub schema: Schema,
    pub templates: Vec<TransactionTemplate>,
    pub classification: Vec<TxnClassification>,
    pub initial: Database,
    pub commits: Vec<Commit>,
    pub commit_of: BTreeMap<OpId, usize>,
    /// In trace order.
    pub broadcasts: Vec<Broadcast>,
    pub broadcast_of: BTreeMap<OpId, usize>,
    /// Per server, in commit order. Corresponds to `T'_p` restricted to
    /// updates.
    pub deliveries: Vec<Vec<Delivery>>,
    pub invoked_at: BTreeMap<OpId, u64>,
    pub replied: BTreeSet<OpId>,
    pub finals: BTreeMap<ServerId, Database>,
    pub complete: bool,
}

fn malformed(seq: u64, msg: impl Into<String>) -> CheckError {
    CheckError::Malformed {
        seq,
        msg: msg.into(),
    }
}

impl History {
    pub fn from_trace(trace: &Trace) -> Result<History, CheckError> {
        let Some(EventKind::Header {
            n_servers,
            schema,
            templates,
            classification,
            initial,
            ..
        }) = trace.header()
        else {
            return Err(malformed(0, "missing header"));
        };
        let n = *n_servers;
        let templates = parse_templates(templates)
            .and_then(|ts| ts.iter().map(|t| t.derive_access_sets(schema)).collect::<Result<Vec<_>, _>>())
            .map_err(|e| malformed(0, format!("templates: {e}")))?;
        let initial =
            Database::load(schema.clone(), initial).map_err(|e| malformed(0, format!("initial state: {e}")))?;
        let mut h = History {
            n,
            schema: schema.clone(),
            templates,
            classification: classification.clone(),
            initial,
            commits: Vec::new(),
            commit_of: BTreeMap::new(),
            broadcasts: Vec::new(),
            broadcast_of: BTreeMap::new(),
            deliveries: vec![Vec::new(); n],
            invoked_at: BTreeMap::new(),
            replied: BTreeSet::new(),
            finals: BTreeMap::new(),
            complete: trace.is_complete(),
        };
        let mut begun: BTreeSet<(ServerId, OpId)> = BTreeSet::new();
        let mut applied: Vec<(ServerId, OpId, ServerId, u64, u64)> = Vec::new();
        let check_server = |s: ServerId, seq: u64| {
            if s >= n {
                Err(malformed(seq, format!("server {s} out of range")))
            } else {
                Ok(())
            }
        };
        for (i, e) in trace.events.iter().enumerate() {
            let seq = e.seq;
            match &e.kind {
                EventKind::Header { .. } if i > 0 => return Err(malformed(seq, "second header")),
                EventKind::ReqSent { op, .. } => {
                    h.invoked_at.entry(*op).or_insert(e.t_us);
                }
                EventKind::ExecBegin { server, op, .. } => {
                    check_server(*server, seq)?;
                    begun.insert((*server, *op));
                }
                EventKind::ExecCommit {
                    server,
                    op,
                    txn,
                    args,
                    class,
                    commit_seq,
                    epoch,
                    reply,
                    update,
                    footprint,
                } => {
                    check_server(*server, seq)?;
                    if !begun.contains(&(*server, *op)) {
                        return Err(malformed(seq, format!("commit of {op} without a begin")));
                    }
                    if h.commit_of.contains_key(op) {
                        return Err(malformed(seq, format!("operation {op} committed twice")));
                    }
                    h.commit_of.insert(*op, h.commits.len());
                    h.commits.push(Commit {
                        server: *server,
                        op: *op,
                        txn: txn.clone(),
                        args: args.clone(),
                        class: *class,
                        commit_seq: *commit_seq,
                        epoch: *epoch,
                        reply: reply.clone(),
                        update: update.clone(),
                        footprint: footprint.clone(),
                        t_us: e.t_us,
                        seq,
                    });
                }
                EventKind::UpdateAppended { server, update, epoch } => {
                    check_server(*server, seq)?;
                    h.broadcast_of.entry(*update).or_insert(h.broadcasts.len());
                    h.broadcasts.push(Broadcast {
                        op: *update,
                        origin: *server,
                        epoch: *epoch,
                        seq,
                    });
                }
                EventKind::UpdateApplied {
                    server,
                    update,
                    origin,
                    commit_seq,
                    ..
                } => {
                    check_server(*server, seq)?;
                    applied.push((*server, *update, *origin, *commit_seq, seq));
                }
                EventKind::RespReceived {
                    op,
                    response: Response::Reply,
                    ..
                } => {
                    h.replied.insert(*op);
                }
                EventKind::Final { server, dump } => {
                    check_server(*server, seq)?;
                    let db = Database::load(schema.clone(), dump)
                        .map_err(|e| malformed(seq, format!("final state of {server}: {e}")))?;
                    h.finals.insert(*server, db);
                }
                _ => {}
            }
        }
        for (server, op, origin, commit_seq, seq) in applied {
            h.deliveries[server].push(Delivery {
                op,
                origin,
                commit_seq,
                seq,
            });
        }
        for b in &h.broadcasts {
            let c = h
                .commit_of
                .get(&b.op)
                .map(|&i| &h.commits[i])
                .filter(|c| c.server == b.origin)
                .ok_or_else(|| malformed(b.seq, format!("update {} appended without a commit at its origin", b.op)))?;
            h.deliveries[b.origin].push(Delivery {
                op: b.op,
                origin: b.origin,
                commit_seq: c.commit_seq,
                seq: c.seq,
            });
        }
        for d in &mut h.deliveries {
            d.sort_by_key(|x| (x.commit_seq, x.seq));
        }
        Ok(h)
    }

    pub fn commit(&self, op: OpId) -> Option<&Commit> {
        self.commit_of.get(&op).map(|&i| &self.commits[i])
    }

    pub fn template(&self, name: &str) -> Option<&TransactionTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    /// Delivered update ids at `p`, in order.
    pub fn order_at(&self, p: ServerId) -> Vec<OpId> {
        self.deliveries[p].iter().map(|d| d.op).collect()
    }
}
