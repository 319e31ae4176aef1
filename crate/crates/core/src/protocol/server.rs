use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use super::{
    Action, Endpoint, Fault, Message, Operation, ProtocolError, Router, ServerConfig, Token,
    TokenEntry,
};
use crate::minisql::{Statement, TransactionTemplate};
use crate::partitioner::OperationClass;
use crate::store::{Database, Engine, ExecOutcome, Reply, StmtResult, TxnId, UpdateQueue};
use crate::trace::{ClientId, Decision, EventKind, OpId, ServerId};

pub type JobId = u64;

#[derive(Debug)]
struct Job {
    op: Operation,
    client: ClientId,
    class: OperationClass,
    stmts: Vec<Statement>,
    idx: usize,
    txn: Option<TxnId>,
    results: Reply,
    attempt: u32,
}

impl Job {
    fn is_global(&self) -> bool {
        self.class == OperationClass::Global
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Phase {
    Apply,
    Execute,
}

#[derive(Debug)]
struct Holding {
    epoch: u64,
    phase: Phase,
    /// Entries still to be applied or purged, in application order.
    incoming: VecDeque<TokenEntry>,
    /// In-progress apply transaction and its next statement.
    apply: Option<(TxnId, usize)>,
    apply_blocked: bool,
    /// Foreign entries that travel on.
    kept: Vec<TokenEntry>,
    appended: Vec<TokenEntry>,
    pending: BTreeSet<JobId>,
    hold_done: bool,
    received_at: u64,
}

/// Counters the simulator folds into its metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServerStats {
    pub tokens: u64,
    pub hold_us_total: u64,
    pub max_queue: usize,
    pub local_aborts: u64,
    pub global_aborts: u64,
}

/// One server of the ring.
#[derive(Debug)]
pub struct Server {
    id: ServerId,
    n: usize,
    cfg: ServerConfig,
    engine: Engine,
    router: Arc<Router>,
    templates: Arc<BTreeMap<String, TransactionTemplate>>,
    queue: Vec<(Operation, ClientId)>,
    jobs: BTreeMap<JobId, Job>,
    next_job: JobId,
    ready: VecDeque<JobId>,
    parked: Vec<JobId>,
    running: usize,
    holding: Option<Holding>,
    u: UpdateQueue,
    seen_releases: u64,
    stats: ServerStats,
    /// Time of the event being handled.
    now: u64,
}

impl Server {
    pub fn new(
        id: ServerId,
        n: usize,
        cfg: ServerConfig,
        db: Database,
        router: Arc<Router>,
        templates: Arc<BTreeMap<String, TransactionTemplate>>,
    ) -> Self {
        Server {
            id,
            n,
            cfg,
            engine: Engine::new(db),
            router,
            templates,
            queue: Vec::new(),
            jobs: BTreeMap::new(),
            next_job: 0,
            ready: VecDeque::new(),
            parked: Vec::new(),
            running: 0,
            holding: None,
            u: UpdateQueue::default(),
            seen_releases: 0,
            stats: ServerStats::default(),
            now: 0,
        }
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn db(&self) -> &Database {
        self.engine.db()
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn holds_token(&self) -> bool {
        self.holding.is_some()
    }

    /// No queued globals and no operation in progress.
    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.jobs.is_empty()
    }

    fn trace(out: &mut Vec<Action>, e: EventKind) {
        out.push(Action::Trace(e));
    }

    fn spawn(&mut self, op: Operation, client: ClientId, class: OperationClass) -> Result<JobId, ProtocolError> {
        let tpl = self
            .templates
            .get(&op.txn)
            .ok_or_else(|| ProtocolError::UnknownTransaction(op.txn.clone()))?;
        let stmts = tpl.bind(&op.args)?;
        let id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(
            id,
            Job {
                op,
                client,
                class,
                stmts,
                idx: 0,
                txn: None,
                results: Vec::new(),
                attempt: 0,
            },
        );
        self.ready.push_back(id);
        Ok(id)
    }

    /// A client request arrives.
    pub fn on_request(
        &mut self,
        op: Operation,
        client: ClientId,
        now: u64,
        out: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        self.now = now;
        let route = self.router.route(&op.txn, &op.args)?;
        let decision = match (route.class, route.server) {
            (OperationClass::Commutative, _) => Decision::Execute,
            (_, Some(s)) if s != self.id => Decision::Map { to: s },
            (OperationClass::Global, _) => Decision::Enqueue,
            _ => Decision::Execute,
        };
        Self::trace(
            out,
            EventKind::ReqReceived {
                server: self.id,
                op: op.id,
                class: route.class,
                decision,
            },
        );
        match decision {
            Decision::Map { to } => {
                Self::trace(
                    out,
                    EventKind::MapSent {
                        server: self.id,
                        op: op.id,
                        client,
                        to,
                    },
                );
                out.push(Action::Send {
                    to: Endpoint::Client(client),
                    msg: Message::Map { op: op.id, to },
                });
            }
            Decision::Enqueue => {
                self.queue.push((op, client));
                self.stats.max_queue = self.stats.max_queue.max(self.queue.len());
            }
            Decision::Execute => {
                self.spawn(op, client, route.class)?;
            }
        }
        self.pump(out)
    }

    /// The token arrives from the ring predecessor.
    pub fn on_token(&mut self, mut token: Token, now: u64, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.now = now;
        token.epoch += 1;
        let epoch = token.epoch;
        self.stats.tokens += 1;
        Self::trace(
            out,
            EventKind::TokenReceived {
                server: self.id,
                epoch,
                entries: token.entries.iter().map(|e| e.id).collect(),
            },
        );
        let mut incoming: VecDeque<TokenEntry> = token.entries.into();
        if self.cfg.fault == Fault::ReverseApply {
            incoming = incoming.into_iter().rev().collect();
        }
        self.holding = Some(Holding {
            epoch,
            phase: Phase::Apply,
            incoming,
            apply: None,
            apply_blocked: false,
            kept: Vec::new(),
            appended: Vec::new(),
            pending: BTreeSet::new(),
            hold_done: false,
            received_at: now,
        });
        out.push(Action::HoldTimer {
            epoch,
            delay_us: self.cfg.min_hold_us,
        });
        self.advance_token(out)?;
        self.pump(out)
    }

    pub fn on_hold_timer(&mut self, epoch: u64, now: u64, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.now = now;
        if let Some(h) = self.holding.as_mut() {
            if h.epoch == epoch {
                h.hold_done = true;
                self.advance_token(out)?;
            }
        }
        Ok(())
    }

    /// The current statement slice of `job` has elapsed.
    pub fn on_step(&mut self, job_id: JobId, now: u64, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.now = now;
        let job = self.jobs.get_mut(&job_id).expect("scheduled job exists");
        let txn = job.txn.expect("running job has a transaction");
        if job.idx < job.stmts.len() {
            match self.engine.exec(txn, &job.stmts[job.idx])? {
                ExecOutcome::Done(r) => {
                    job.results.push(r);
                    job.idx += 1;
                    if job.idx < job.stmts.len() {
                        let delay_us = self.slice(job_id);
                        out.push(Action::Step { job: job_id, delay_us });
                        return self.pump(out);
                    }
                }
                ExecOutcome::Blocked => {
                    self.running -= 1;
                    self.parked.push(job_id);
                    return self.pump(out);
                }
                ExecOutcome::Aborted => {
                    self.running -= 1;
                    self.after_abort(job_id, out);
                    return self.pump(out);
                }
            }
        }
        self.finish(job_id, out)?;
        self.pump(out)
    }

    fn slice(&self, job: JobId) -> u64 {
        let n = self.jobs[&job].stmts.len().max(1) as u64;
        self.cfg.service_us / n
    }

    fn after_abort(&mut self, job_id: JobId, out: &mut Vec<Action>) {
        let limit = self.cfg.local_retries;
        let job = self.jobs.get_mut(&job_id).expect("job exists");
        let give_up = !job.is_global() && job.attempt >= limit;
        if job.is_global() {
            self.stats.global_aborts += 1;
        } else {
            self.stats.local_aborts += 1;
        }
        Self::trace(
            out,
            EventKind::ExecAbort {
                server: self.id,
                op: job.op.id,
                attempt: job.attempt,
                is_final: give_up,
            },
        );
        if give_up {
            let job = self.jobs.remove(&job_id).expect("job exists");
            if let Some(t) = job.txn {
                self.engine.forget(t);
            }
            self.reply(
                job.op.id,
                job.client,
                vec![StmtResult::Error(format!(
                    "aborted after {} attempts",
                    job.attempt + 1
                ))],
                out,
            );
            return;
        }
        job.attempt += 1;
        job.idx = 0;
        if let Some(t) = job.txn.take() {
            self.engine.forget(t);
        }
        job.results.clear();
        self.ready.push_back(job_id);
    }

    fn reply(&self, op: OpId, client: ClientId, reply: Reply, out: &mut Vec<Action>) {
        Self::trace(
            out,
            EventKind::ReplySent {
                server: self.id,
                op,
                client,
            },
        );
        out.push(Action::Send {
            to: Endpoint::Client(client),
            msg: Message::Reply { op, reply },
        });
    }

    fn finish(&mut self, job_id: JobId, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let job = self.jobs.remove(&job_id).expect("job exists");
        let txn = job.txn.expect("job has a transaction");
        self.running -= 1;
        let global = job.is_global();
        let info = self
            .engine
            .commit(txn, if global { Some(&mut self.u) } else { None })?;
        let epoch = self.holding.as_ref().map(|h| h.epoch);
        Self::trace(
            out,
            EventKind::ExecCommit {
                server: self.id,
                op: job.op.id,
                txn: job.op.txn.clone(),
                args: job.op.args.clone(),
                class: job.class,
                commit_seq: info.commit_seq,
                epoch: if global { epoch } else { None },
                reply: job.results.clone(),
                update: info.update.clone(),
                footprint: info.footprint,
            },
        );
        if global {
            let h = self.holding.as_mut().expect("globals run while holding the token");
            let mut entries: Vec<TokenEntry> = self
                .u
                .drain()
                .into_iter()
                .map(|(label, update)| TokenEntry {
                    id: label.parse().expect("labels are operation ids"),
                    origin: self.id,
                    update,
                })
                .collect();
            if entries.is_empty() {
                entries.push(TokenEntry {
                    id: job.op.id,
                    origin: self.id,
                    update: Default::default(),
                });
            }
            for e in entries {
                out.push(Action::Trace(EventKind::UpdateAppended {
                    server: self.id,
                    update: e.id,
                    epoch: h.epoch,
                }));
                h.appended.push(e);
            }
            h.pending.remove(&job_id);
        }
        self.reply(job.op.id, job.client, job.results, out);
        if global {
            self.advance_token(out)?;
        }
        Ok(())
    }

    /// Runs the token phases as far as they can go right now.
    fn advance_token(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let Some(h) = self.holding.as_mut() else {
            return Ok(());
        };
        if h.phase == Phase::Apply {
            if h.apply_blocked {
                return Ok(());
            }
            while let Some(entry) = h.incoming.front() {
                if entry.origin == self.id {
                    out.push(Action::Trace(EventKind::UpdatePurged {
                        server: self.id,
                        update: entry.id,
                        epoch: h.epoch,
                    }));
                    h.incoming.pop_front();
                    continue;
                }
                if self.cfg.fault == Fault::DropApply && self.id == 0 {
                    h.kept.push(h.incoming.pop_front().expect("front exists"));
                    continue;
                }
                let (txn, mut idx) = match h.apply {
                    Some(a) => a,
                    None => (self.engine.begin(&format!("apply-{}", entry.id)), 0),
                };
                let mut restart = false;
                while idx < entry.update.statements.len() {
                    match self.engine.exec(txn, &entry.update.statements[idx])? {
                        ExecOutcome::Done(StmtResult::Error(msg)) => {
                            return Err(ProtocolError::ApplyFailed {
                                server: self.id,
                                update: entry.id,
                                msg,
                            })
                        }
                        ExecOutcome::Done(_) => idx += 1,
                        ExecOutcome::Blocked => {
                            h.apply = Some((txn, idx));
                            h.apply_blocked = true;
                            return Ok(());
                        }
                        ExecOutcome::Aborted => {
                            restart = true;
                            break;
                        }
                    }
                }
                if restart {
                    self.engine.forget(txn);
                    h.apply = None;
                    continue;
                }
                let info = self.engine.commit(txn, None)?;
                h.apply = None;
                out.push(Action::Trace(EventKind::UpdateApplied {
                    server: self.id,
                    update: entry.id,
                    origin: entry.origin,
                    commit_seq: info.commit_seq,
                    epoch: h.epoch,
                }));
                h.kept.push(h.incoming.pop_front().expect("front exists"));
            }
            if self.cfg.fault == Fault::ReverseApply {
                h.kept.reverse();
            }
            // atomic snapshot of Q
            h.phase = Phase::Execute;
            let batch = std::mem::take(&mut self.queue);
            out.push(Action::Trace(EventKind::QueueSnapshot {
                server: self.id,
                epoch: h.epoch,
                ops: batch.iter().map(|(op, _)| op.id).collect(),
            }));
            for (op, client) in batch {
                let id = self.spawn(op, client, OperationClass::Global)?;
                self.holding.as_mut().expect("holding").pending.insert(id);
            }
        }
        let h = self.holding.as_mut().expect("holding");
        if h.phase == Phase::Execute && h.pending.is_empty() && h.hold_done {
            let h = self.holding.take().expect("holding");
            self.stats.hold_us_total += self.now - h.received_at;
            let mut entries = h.kept;
            entries.extend(h.appended);
            let to = (self.id + 1) % self.n;
            out.push(Action::Trace(EventKind::TokenPassed {
                server: self.id,
                to,
                epoch: h.epoch,
                entries: entries.iter().map(|e| e.id).collect(),
            }));
            out.push(Action::Send {
                to: Endpoint::Server(to),
                msg: Message::Token(Token {
                    epoch: h.epoch,
                    entries,
                }),
            });
        }
        Ok(())
    }

    /// Wakes waiters after lock releases and hands free cores to ready jobs.
    fn pump(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        loop {
            if self.engine.releases() != self.seen_releases {
                self.seen_releases = self.engine.releases();
                let engine = &self.engine;
                let jobs = &self.jobs;
                let (wake, keep): (Vec<JobId>, Vec<JobId>) = self
                    .parked
                    .drain(..)
                    .partition(|j| jobs[j].txn.is_none_or(|t| !engine.is_waiting(t)));
                self.parked = keep;
                self.ready.extend(wake);
                let blocked = self.holding.as_ref().is_some_and(|h| {
                    h.apply_blocked && h.apply.is_none_or(|(t, _)| !self.engine.is_waiting(t))
                });
                if blocked {
                    self.holding.as_mut().expect("holding").apply_blocked = false;
                    self.advance_token(out)?;
                }
                continue;
            }
            if self.running < self.cfg.cores {
                if let Some(job_id) = self.ready.pop_front() {
                    let job = self.jobs.get_mut(&job_id).expect("ready job exists");
                    if job.txn.is_none() {
                        job.txn = Some(self.engine.begin(&job.op.id.to_string()));
                        out.push(Action::Trace(EventKind::ExecBegin {
                            server: self.id,
                            op: job.op.id,
                            attempt: job.attempt,
                        }));
                    }
                    self.running += 1;
                    let delay_us = self.slice(job_id);
                    out.push(Action::Step { job: job_id, delay_us });
                    continue;
                }
            }
            self.engine.gc();
            return Ok(());
        }
    }
}
