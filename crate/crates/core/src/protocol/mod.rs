//! The per-server state machine of the token protocol.
//!
//! A [`Server`] reacts to requests, token arrivals, completion of execution
//! steps and the token hold timer. Each handler returns [`Action`]s for the
//! caller (the simulator) to perform: messages to send, steps to schedule
//! and trace events to record.

mod routing;
mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Reply, StateUpdate, StoreError};
use crate::trace::{ClientId, EventKind, OpId, ServerId};
use crate::value::Value;

pub use routing::{server_for, Route, Router};
pub use server::{JobId, Server, ServerStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("unknown transaction {0}")]
    UnknownTransaction(String),
    #[error("wrong number of arguments for {0}")]
    Arity(String),
    #[error("server {server} failed to apply update {update}: {msg}")]
    ApplyFailed {
        server: ServerId,
        update: OpId,
        msg: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sql(#[from] crate::minisql::SqlError),
}

/// A transaction template invoked with concrete arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    pub id: OpId,
    pub txn: String,
    pub args: Vec<Value>,
}

/// One `<u, q>` pair of the token. Read-only globals leave an entry with an
/// empty update so that their position in the order is still visible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub id: OpId,
    pub origin: ServerId,
    pub update: StateUpdate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// Number of receptions so far, across all servers.
    pub epoch: u64,
    pub entries: Vec<TokenEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Req { op: Operation, client: ClientId },
    Reply { op: OpId, reply: Reply },
    Map { op: OpId, to: ServerId },
    Token(Token),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Server(ServerId),
    Client(ClientId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: Endpoint, msg: Message },
    /// Call [`Server::on_step`] for `job` after `delay_us`.
    Step { job: JobId, delay_us: u64 },
    /// Call [`Server::on_hold_timer`] for `epoch` after `delay_us`.
    HoldTimer { epoch: u64, delay_us: u64 },
    Trace(EventKind),
}

/// Deliberate protocol bugs, used to show that the checker notices them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Foreign token entries are applied last to first.
    ReverseApply,
    /// Server 0 never applies foreign token entries.
    DropApply,
}

impl Fault {
    pub fn name(self) -> Option<String> {
        match self {
            Fault::None => None,
            Fault::ReverseApply => Some("reverse_apply".into()),
            Fault::DropApply => Some("drop_apply".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Operations executing at the same time.
    pub cores: usize,
    /// Execution time of one operation, split evenly over its statements.
    pub service_us: u64,
    /// Shortest time a server keeps the token.
    pub min_hold_us: u64,
    /// Attempts after a deadlock abort before a local operation gives up.
    pub local_retries: u32,
    pub fault: Fault,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            cores: 2,
            service_us: 5_000,
            min_hold_us: 1_000,
            local_retries: 3,
            fault: Fault::None,
        }
    }
}
