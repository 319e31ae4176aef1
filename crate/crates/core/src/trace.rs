//! The event trace written by the simulator and read by the checker.
//!
//! A trace is JSON lines. The first line is a [`EventKind::Header`], the
//! last an [`EventKind::End`]. Every line carries the simulated time in
//! microseconds and a sequence number that totally orders the events.
//!
//! | event | meaning |
//! |---|---|
//! | `req_sent` | a client sent an operation to a server |
//! | `req_received` | a server received it and decided what to do |
//! | `exec_begin` | a transaction for the operation started |
//! | `exec_commit` | the operation committed; carries reply and update |
//! | `exec_abort` | an attempt was rolled back (`final` if given up) |
//! | `token_received` | a server took the token; `epoch` counts receptions |
//! | `update_applied` | a foreign token entry was applied locally |
//! | `update_purged` | the origin removed its own entry from the token |
//! | `queue_snapshot` | the batch of pending globals for this epoch |
//! | `update_appended` | an executed global's entry joined the token |
//! | `token_passed` | the token left for the next server |
//! | `reply_sent` / `map_sent` | the server answered a request |
//! | `resp_received` | the client got a reply or a redirect |
//! | `final` | a server's state when the run stopped |

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minisql::Schema;
use crate::partitioner::{OperationClass, TxnClassification};
use crate::store::{Reply, RowRef, StateUpdate};
use crate::value::Value;

pub const TRACE_VERSION: u32 = 1;

pub type OpId = u64;
pub type ServerId = usize;
pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Decision {
    Execute,
    Enqueue,
    Map { to: ServerId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Reply,
    Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum EventKind {
    Header {
        version: u32,
        n_servers: usize,
        seed: u64,
        schema: Schema,
        /// Template file text.
        templates: String,
        classification: Vec<TxnClassification>,
        /// Canonical dump of the state every server starts from.
        initial: String,
        /// Name of an injected protocol fault, if any.
        fault: Option<String>,
    },
    ReqSent {
        client: ClientId,
        op: OpId,
        txn: String,
        args: Vec<Value>,
        to: ServerId,
    },
    ReqReceived {
        server: ServerId,
        op: OpId,
        class: OperationClass,
        decision: Decision,
    },
    ExecBegin {
        server: ServerId,
        op: OpId,
        attempt: u32,
    },
    ExecCommit {
        server: ServerId,
        op: OpId,
        txn: String,
        args: Vec<Value>,
        class: OperationClass,
        commit_seq: u64,
        /// Token epoch for globals executed while holding the token.
        epoch: Option<u64>,
        reply: Reply,
        update: StateUpdate,
        footprint: Vec<RowRef>,
    },
    ExecAbort {
        server: ServerId,
        op: OpId,
        attempt: u32,
        #[serde(rename = "final")]
        is_final: bool,
    },
    TokenReceived {
        server: ServerId,
        epoch: u64,
        entries: Vec<OpId>,
    },
    UpdateApplied {
        server: ServerId,
        update: OpId,
        origin: ServerId,
        commit_seq: u64,
        epoch: u64,
    },
    UpdatePurged {
        server: ServerId,
        update: OpId,
        epoch: u64,
    },
    QueueSnapshot {
        server: ServerId,
        epoch: u64,
        ops: Vec<OpId>,
    },
    UpdateAppended {
        server: ServerId,
        update: OpId,
        epoch: u64,
    },
    TokenPassed {
        server: ServerId,
        to: ServerId,
        epoch: u64,
        entries: Vec<OpId>,
    },
    ReplySent {
        server: ServerId,
        op: OpId,
        client: ClientId,
    },
    MapSent {
        server: ServerId,
        op: OpId,
        client: ClientId,
        to: ServerId,
    },
    RespReceived {
        client: ClientId,
        op: OpId,
        response: Response,
    },
    Final {
        server: ServerId,
        dump: String,
    },
    End {
        /// True when the run drained: no request in flight, no pending
        /// work, and an empty token.
        complete: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_us: u64,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("trace is empty")]
    Empty,
    #[error("unsupported trace version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, t_us: u64, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { t_us, seq, kind });
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TraceEvent = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?;
            events.push(e);
        }
        let trace = Trace { events };
        match trace.events.first().map(|e| &e.kind) {
            None => Err(TraceError::Empty),
            Some(EventKind::Header { version, .. }) if *version != TRACE_VERSION => {
                Err(TraceError::Version(*version))
            }
            Some(EventKind::Header { .. }) => Ok(trace),
            Some(_) => Err(TraceError::Malformed {
                line: 1,
                msg: "first event must be the header".into(),
            }),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        Trace::read_jsonl(text.as_bytes())
    }

    pub fn header(&self) -> Option<&EventKind> {
        self.events
            .first()
            .map(|e| &e.kind)
            .filter(|k| matches!(k, EventKind::Header { .. }))
    }

    pub fn n_servers(&self) -> usize {
        match self.header() {
            Some(EventKind::Header { n_servers, .. }) => *n_servers,
            _ => 0,
        }
    }

    /// Whether the trace ends with a drained run.
    pub fn is_complete(&self) -> bool {
        matches!(
            self.events.last().map(|e| &e.kind),
            Some(EventKind::End { complete: true })
        )
    }

    pub fn kinds(&self) -> impl Iterator<Item = &EventKind> {
        self.events.iter().map(|e| &e.kind)
    }
}
