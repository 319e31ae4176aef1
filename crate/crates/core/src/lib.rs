//! Static operation partitioning and a token-ring protocol that serializes
//! the operations that cannot be partitioned.
//!
//! The pipeline: parse transaction templates ([`minisql`]), derive their
//! read and write sets, detect conflicts and choose a partitioning
//! ([`partitioner`]), then run the protocol in a deterministic simulator
//! and audit the resulting trace.

pub mod bundled;
pub mod checker;
pub mod condition;
pub mod minisql;
pub mod partitioner;
pub mod protocol;
pub mod sim;
pub mod store;
pub mod trace;
pub mod value;

pub use condition::{Atom, Conjunction, Dnf, Instance, Term};
pub use minisql::{Schema, TableDef, TransactionTemplate};
pub use partitioner::{ClassificationReport, OperationClass, PartitioningArray};
pub use value::Value;
