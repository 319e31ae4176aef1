use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::lock::{LockMode, LockTable, Resource};
use super::{pinned_key, Database, RowRef, StateUpdate, StmtResult, StoreError, Undo};
use crate::minisql::Statement;

pub type TxnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnStatus {
    Active,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Done(StmtResult),
    /// A lock is held by someone else; retry the same statement later.
    Blocked,
    /// The transaction was chosen as a deadlock victim and rolled back.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitInfo {
    pub update: StateUpdate,
    pub commit_seq: u64,
    /// Rows the transaction inserted, updated or deleted.
    pub footprint: Vec<RowRef>,
}

/// The queue `U` of committed updates, in commit order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateQueue {
    entries: Vec<(String, StateUpdate)>,
}

impl UpdateQueue {
    pub fn push(&mut self, label: &str, u: StateUpdate) {
        self.entries.push((label.to_string(), u));
    }

    pub fn drain(&mut self) -> Vec<(String, StateUpdate)> {
        std::mem::take(&mut self.entries)
    }

    pub fn entries(&self) -> &[(String, StateUpdate)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug)]
struct Txn {
    label: String,
    status: TxnStatus,
    undo: Vec<Undo>,
    update: Vec<Statement>,
    footprint: BTreeSet<RowRef>,
}

/// A transactional store driven one statement at a time.
///
/// `exec` never waits: when a lock is unavailable it returns
/// [`ExecOutcome::Blocked`] and the caller retries later, typically after
/// [`releases`](Engine::releases) has moved. Deadlocks are resolved when
/// they form by aborting the youngest transaction of the cycle.
#[derive(Debug)]
pub struct Engine {
    db: Database,
    locks: LockTable,
    txns: BTreeMap<TxnId, Txn>,
    next_id: TxnId,
    commit_seq: u64,
    releases: u64,
}

fn lock_plan(db: &Database, stmt: &Statement) -> Vec<(Resource, LockMode)> {
    let table = stmt.table().to_string();
    let Some(t) = db.table(&table) else {
        return Vec::new();
    };
    let row = |key: Vec<crate::value::Value>, intent, mode| {
        vec![
            (Resource::Table(table.clone()), intent),
            (Resource::Row(table.clone(), key), mode),
        ]
    };
    match stmt {
        Statement::Select { filter, .. } => match pinned_key(&t.def, filter) {
            Some(k) => row(k, LockMode::IS, LockMode::S),
            None => vec![(Resource::Table(table.clone()), LockMode::S)],
        },
        Statement::Update { filter, .. } | Statement::Delete { filter, .. } => {
            match pinned_key(&t.def, filter) {
                Some(k) => row(k, LockMode::IX, LockMode::X),
                None => vec![(Resource::Table(table.clone()), LockMode::X)],
            }
        }
        Statement::Insert { columns, values, .. } => {
            let key = t
                .def
                .key
                .iter()
                .map(|k| {
                    columns.iter().position(|c| c == k).and_then(|i| match &values[i] {
                        crate::minisql::Operand::Const(v) => Some(v.clone()),
                        crate::minisql::Operand::Param(_) => None,
                    })
                })
                .collect::<Option<Vec<_>>>();
            match key {
                Some(k) => row(k, LockMode::IX, LockMode::X),
                None => vec![(Resource::Table(table.clone()), LockMode::X)],
            }
        }
    }
}

impl Engine {
    pub fn new(db: Database) -> Self {
        Engine {
            db,
            locks: LockTable::default(),
            txns: BTreeMap::new(),
            next_id: 1,
            commit_seq: 0,
            releases: 0,
        }
    }

    pub fn db(&self) -> &Database {
        &self.db
    }

    /// Consumes the engine. Active transactions are rolled back first.
    pub fn into_db(mut self) -> Database {
        let active: Vec<TxnId> = self.active();
        for t in active {
            self.abort(t);
        }
        self.db
    }

    pub fn begin(&mut self, label: &str) -> TxnId {
        let id = self.next_id;
        self.next_id += 1;
        self.txns.insert(
            id,
            Txn {
                label: label.to_string(),
                status: TxnStatus::Active,
                undo: Vec::new(),
                update: Vec::new(),
                footprint: BTreeSet::new(),
            },
        );
        id
    }

    pub fn status(&self, txn: TxnId) -> Option<TxnStatus> {
        self.txns.get(&txn).map(|t| t.status)
    }

    pub fn label(&self, txn: TxnId) -> Option<&str> {
        self.txns.get(&txn).map(|t| t.label.as_str())
    }

    pub fn active(&self) -> Vec<TxnId> {
        self.txns
            .iter()
            .filter(|(_, t)| t.status == TxnStatus::Active)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Incremented whenever locks are released by a commit or an abort.
    pub fn releases(&self) -> u64 {
        self.releases
    }

    pub fn commit_seq(&self) -> u64 {
        self.commit_seq
    }

    pub fn is_waiting(&self, txn: TxnId) -> bool {
        self.locks.is_waiting(txn)
    }

    fn require_active(&self, txn: TxnId) -> Result<(), StoreError> {
        match self.status(txn) {
            Some(TxnStatus::Active) => Ok(()),
            _ => Err(StoreError::NotActive(txn)),
        }
    }

    /// Executes one concrete statement inside `txn`.
    pub fn exec(&mut self, txn: TxnId, stmt: &Statement) -> Result<ExecOutcome, StoreError> {
        if self.status(txn) == Some(TxnStatus::Aborted) {
            return Ok(ExecOutcome::Aborted);
        }
        self.require_active(txn)?;
        stmt.check(self.db.schema())?;
        if !stmt.is_concrete() {
            return Err(StoreError::NotConcrete(stmt.to_string()));
        }
        for (res, mode) in lock_plan(&self.db, stmt) {
            loop {
                if self.locks.request(txn, &res, mode) {
                    break;
                }
                let Some(cycle) = self.locks.cycle_from(txn) else {
                    return Ok(ExecOutcome::Blocked);
                };
                let victim = *cycle.iter().max().expect("non-empty cycle");
                self.abort(victim);
                if victim == txn {
                    return Ok(ExecOutcome::Aborted);
                }
            }
        }
        let t = self.txns.get_mut(&txn).expect("active txn");
        let mark = t.undo.len();
        match self.db.execute_logged(stmt, &mut t.undo) {
            Ok(res) => {
                if t.undo.len() > mark {
                    t.update.push(stmt.clone());
                    for u in &t.undo[mark..] {
                        let (Undo::Inserted(tb, k) | Undo::Deleted(tb, k, _) | Undo::Updated(tb, k, _)) = u;
                        t.footprint.insert(RowRef {
                            table: tb.clone(),
                            key: k.clone(),
                        });
                    }
                }
                Ok(ExecOutcome::Done(res))
            }
            Err(e @ (StoreError::DuplicateKey { .. } | StoreError::Type(_))) => {
                Ok(ExecOutcome::Done(StmtResult::Error(e.to_string())))
            }
            Err(e) => Err(e),
        }
    }

    /// Commits `txn`. A non-empty update is appended to `u` before any lock
    /// is released.
    pub fn commit(&mut self, txn: TxnId, u: Option<&mut UpdateQueue>) -> Result<CommitInfo, StoreError> {
        if self.status(txn) == Some(TxnStatus::Aborted) {
            return Err(StoreError::Aborted(txn));
        }
        self.require_active(txn)?;
        self.commit_seq += 1;
        let t = self.txns.get_mut(&txn).expect("active txn");
        t.status = TxnStatus::Committed;
        t.undo.clear();
        let update = StateUpdate {
            statements: std::mem::take(&mut t.update),
        };
        if let Some(u) = u {
            if !update.is_empty() {
                u.push(&t.label, update.clone());
            }
        }
        let footprint = std::mem::take(&mut t.footprint).into_iter().collect();
        self.locks.release_all(txn);
        self.releases += 1;
        Ok(CommitInfo {
            update,
            commit_seq: self.commit_seq,
            footprint,
        })
    }

    /// Rolls `txn` back and releases its locks. No-op unless active.
    pub fn abort(&mut self, txn: TxnId) {
        let Some(t) = self.txns.get_mut(&txn) else {
            return;
        };
        if t.status != TxnStatus::Active {
            return;
        }
        t.status = TxnStatus::Aborted;
        let mut undo = std::mem::take(&mut t.undo);
        t.update.clear();
        t.footprint.clear();
        self.db.rollback(&mut undo, 0);
        self.locks.release_all(txn);
        self.releases += 1;
    }

    /// Forgets committed transactions. Aborted ones stay until their owner
    /// has seen the abort and calls [`Engine::forget`].
    pub fn gc(&mut self) {
        self.txns.retain(|_, t| t.status != TxnStatus::Committed);
    }

    /// Drops an aborted or committed transaction.
    pub fn forget(&mut self, txn: TxnId) {
        if self.status(txn) != Some(TxnStatus::Active) {
            self.txns.remove(&txn);
        }
    }
}

/// Thread-safe wrapper whose `exec` waits for locks instead of returning
/// [`ExecOutcome::Blocked`]. Commits append to one internal queue.
#[derive(Debug)]
pub struct SharedEngine {
    inner: Mutex<(Engine, UpdateQueue)>,
    cv: Condvar,
}

impl SharedEngine {
    pub fn new(db: Database) -> Self {
        SharedEngine {
            inner: Mutex::new((Engine::new(db), UpdateQueue::default())),
            cv: Condvar::new(),
        }
    }

    pub fn begin(&self, label: &str) -> TxnId {
        self.inner.lock().expect("engine lock").0.begin(label)
    }

    /// Runs `stmt`, waiting while blocked. Returns `Aborted` if `txn` is
    /// picked as a deadlock victim.
    pub fn exec(&self, txn: TxnId, stmt: &Statement) -> Result<ExecOutcome, StoreError> {
        let mut g = self.inner.lock().expect("engine lock");
        loop {
            let before = g.0.releases();
            let out = g.0.exec(txn, stmt)?;
            if g.0.releases() != before {
                self.cv.notify_all();
            }
            match out {
                ExecOutcome::Blocked => g = self.cv.wait(g).expect("engine lock"),
                other => return Ok(other),
            }
        }
    }

    pub fn commit(&self, txn: TxnId) -> Result<CommitInfo, StoreError> {
        let mut g = self.inner.lock().expect("engine lock");
        let (engine, queue) = &mut *g;
        let res = engine.commit(txn, Some(queue));
        self.cv.notify_all();
        res
    }

    pub fn abort(&self, txn: TxnId) {
        self.inner.lock().expect("engine lock").0.abort(txn);
        self.cv.notify_all();
    }

    pub fn queue(&self) -> UpdateQueue {
        self.inner.lock().expect("engine lock").1.clone()
    }

    pub fn into_parts(self) -> (Database, UpdateQueue) {
        let (engine, queue) = self.inner.into_inner().expect("engine lock");
        (engine.into_db(), queue)
    }
}
