//! In-memory tables with strict two-phase locking.
//!
//! [`Database`] evaluates concrete statements without any concurrency
//! control and is what replicas and the checker replay into. [`Engine`]
//! wraps it with transactions, a lock manager and update recording.

mod engine;
mod lock;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::minisql::{
    parse_statement, CmpOp, Operand, Predicate, Projection, Schema, SetExpr, SqlError, Statement,
    TableDef,
};
use crate::value::Value;

pub use engine::{
    CommitInfo, Engine, ExecOutcome, SharedEngine, TxnId, TxnStatus, UpdateQueue,
};
pub use lock::{LockMode, Resource};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("duplicate key {key} in {table}")]
    DuplicateKey { table: String, key: String },
    #[error("statement is not concrete: {0}")]
    NotConcrete(String),
    #[error("type error: {0}")]
    Type(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("transaction {0} is not active")]
    NotActive(u64),
    #[error("transaction {0} was aborted")]
    Aborted(u64),
    #[error("bad dump: {0}")]
    Dump(String),
}

/// The outcome of one statement as seen by a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StmtResult {
    Rows {
        columns: Vec<String>,
        rows: Vec<Vec<Value>>,
    },
    Affected(u64),
    Error(String),
}

pub type Reply = Vec<StmtResult>;

/// The mutating statements of one committed transaction, fully concrete.
/// Serializes as a list of SQL strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct StateUpdate {
    pub statements: Vec<Statement>,
}

impl StateUpdate {
    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }
}

impl From<StateUpdate> for Vec<String> {
    fn from(u: StateUpdate) -> Self {
        u.statements.iter().map(|s| s.to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for StateUpdate {
    type Error = SqlError;

    fn try_from(v: Vec<String>) -> Result<Self, SqlError> {
        Ok(StateUpdate {
            statements: v
                .iter()
                .map(|s| parse_statement(s))
                .collect::<Result<_, _>>()?,
        })
    }
}

impl fmt::Display for StateUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.statements {
            writeln!(f, "{s};")?;
        }
        Ok(())
    }
}

/// A row identity: table name plus primary-key values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowRef {
    pub table: String,
    pub key: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub def: TableDef,
    pub rows: BTreeMap<Vec<Value>, Vec<Value>>,
}

impl Table {
    fn key_of(&self, row: &[Value]) -> Vec<Value> {
        self.def.key_indices().iter().map(|&i| row[i].clone()).collect()
    }
}

/// Undo information for one row-level change.
#[derive(Debug, Clone)]
pub(crate) enum Undo {
    Inserted(String, Vec<Value>),
    Deleted(String, Vec<Value>, Vec<Value>),
    Updated(String, Vec<Value>, Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Database {
    schema: Schema,
    tables: BTreeMap<String, Table>,
}

fn operand_value(op: &Operand) -> Result<&Value, StoreError> {
    match op {
        Operand::Const(v) => Ok(v),
        Operand::Param(p) => Err(StoreError::NotConcrete(p.clone())),
    }
}

/// SQL `LIKE` with `%` and `_`.
fn like(s: &str, pattern: &str) -> bool {
    let s: Vec<char> = s.chars().collect();
    let p: Vec<char> = pattern.chars().collect();
    let mut dp = vec![vec![false; s.len() + 1]; p.len() + 1];
    dp[0][0] = true;
    for i in 1..=p.len() {
        if p[i - 1] == '%' {
            dp[i][0] = dp[i - 1][0];
        }
        for j in 1..=s.len() {
            dp[i][j] = match p[i - 1] {
                '%' => dp[i - 1][j] || dp[i][j - 1],
                '_' => dp[i - 1][j - 1],
                c => c == s[j - 1] && dp[i - 1][j - 1],
            };
        }
    }
    dp[p.len()][s.len()]
}

fn matches(def: &TableDef, row: &[Value], filter: &[Predicate]) -> Result<bool, StoreError> {
    for p in filter {
        let v = &row[def.column_index(&p.column).expect("checked column")];
        let rhs = operand_value(&p.operand)?;
        let ok = match p.op {
            CmpOp::Eq => v == rhs,
            CmpOp::Ne => v != rhs,
            CmpOp::Lt => v < rhs,
            CmpOp::Le => v <= rhs,
            CmpOp::Gt => v > rhs,
            CmpOp::Ge => v >= rhs,
            CmpOp::Like => match (v, rhs) {
                (Value::Str(s), Value::Str(pat)) => like(s, pat),
                _ => return Err(StoreError::Type(format!("LIKE on non-string in {}", p.column))),
            },
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Key values when `filter` fixes every key column by equality.
pub(crate) fn pinned_key(def: &TableDef, filter: &[Predicate]) -> Option<Vec<Value>> {
    def.key
        .iter()
        .map(|k| {
            filter.iter().find_map(|p| match (&p.op, &p.operand) {
                (CmpOp::Eq, Operand::Const(v)) if &p.column == k => Some(v.clone()),
                _ => None,
            })
        })
        .collect()
}

impl Database {
    pub fn new(schema: Schema) -> Self {
        let tables = schema
            .tables
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    Table {
                        def: t.clone(),
                        rows: BTreeMap::new(),
                    },
                )
            })
            .collect();
        Database { schema, tables }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    pub fn row(&self, r: &RowRef) -> Option<&Vec<Value>> {
        self.tables.get(&r.table)?.rows.get(&r.key)
    }

    pub fn row_count(&self) -> usize {
        self.tables.values().map(|t| t.rows.len()).sum()
    }

    /// Inserts a full row, bypassing statements. Used to seed initial data.
    pub fn insert_row(&mut self, table: &str, row: Vec<Value>) -> Result<(), StoreError> {
        let t = self
            .tables
            .get_mut(table)
            .ok_or_else(|| SqlError::UnknownTable(table.to_string()))?;
        if row.len() != t.def.columns.len() {
            return Err(StoreError::Type(format!(
                "{table} has {} columns, row has {}",
                t.def.columns.len(),
                row.len()
            )));
        }
        let key = t.key_of(&row);
        if t.rows.contains_key(&key) {
            return Err(StoreError::DuplicateKey {
                table: table.to_string(),
                key: format!("{key:?}"),
            });
        }
        t.rows.insert(key, row);
        Ok(())
    }

    /// Keys of the rows `filter` selects, in key order.
    fn select_keys(&self, table: &str, filter: &[Predicate]) -> Result<Vec<Vec<Value>>, StoreError> {
        let t = &self.tables[table];
        if let Some(key) = pinned_key(&t.def, filter) {
            return Ok(match t.rows.get(&key) {
                Some(row) if matches(&t.def, row, filter)? => vec![key],
                _ => vec![],
            });
        }
        let mut out = Vec::new();
        for (k, row) in &t.rows {
            if matches(&t.def, row, filter)? {
                out.push(k.clone());
            }
        }
        Ok(out)
    }

    /// Runs one concrete statement. On error nothing is changed.
    pub(crate) fn execute_logged(
        &mut self,
        stmt: &Statement,
        undo: &mut Vec<Undo>,
    ) -> Result<StmtResult, StoreError> {
        stmt.check(&self.schema)?;
        if !stmt.is_concrete() {
            return Err(StoreError::NotConcrete(stmt.to_string()));
        }
        let mark = undo.len();
        let res = self.execute_inner(stmt, undo);
        if res.is_err() {
            self.rollback(undo, mark);
        }
        res
    }

    fn execute_inner(&mut self, stmt: &Statement, undo: &mut Vec<Undo>) -> Result<StmtResult, StoreError> {
        let table = stmt.table().to_string();
        match stmt {
            Statement::Select { columns, filter, .. } => {
                let t = &self.tables[&table];
                let cols: Vec<String> = match columns {
                    Projection::All => t.def.columns.clone(),
                    Projection::Columns(c) => c.clone(),
                };
                let idx: Vec<usize> = cols
                    .iter()
                    .map(|c| t.def.column_index(c).expect("checked column"))
                    .collect();
                let rows = self
                    .select_keys(&table, filter)?
                    .iter()
                    .map(|k| idx.iter().map(|&i| t.rows[k][i].clone()).collect())
                    .collect();
                Ok(StmtResult::Rows { columns: cols, rows })
            }
            Statement::Update {
                assignments,
                filter,
                ..
            } => {
                let keys = self.select_keys(&table, filter)?;
                let t = self.tables.get_mut(&table).expect("checked table");
                for k in &keys {
                    let old = t.rows[k].clone();
                    let mut new = old.clone();
                    for a in assignments {
                        let i = t.def.column_index(&a.column).expect("checked column");
                        new[i] = match &a.expr {
                            SetExpr::Value(o) => operand_value(o)?.clone(),
                            SetExpr::Add(c, o) | SetExpr::Sub(c, o) => {
                                let cur = &old[t.def.column_index(c).expect("checked column")];
                                let (Some(x), Some(y)) = (cur.as_int(), operand_value(o)?.as_int()) else {
                                    return Err(StoreError::Type(format!(
                                        "arithmetic on non-integer in {table}.{c}"
                                    )));
                                };
                                let r = if matches!(a.expr, SetExpr::Add(..)) {
                                    x.checked_add(y)
                                } else {
                                    x.checked_sub(y)
                                };
                                Value::Int(r.ok_or_else(|| StoreError::Type("integer overflow".into()))?)
                            }
                        };
                    }
                    t.rows.insert(k.clone(), new);
                    undo.push(Undo::Updated(table.clone(), k.clone(), old));
                }
                Ok(StmtResult::Affected(keys.len() as u64))
            }
            Statement::Insert { columns, values, .. } => {
                let t = self.tables.get_mut(&table).expect("checked table");
                let mut row = vec![Value::Int(0); t.def.columns.len()];
                for (c, v) in columns.iter().zip(values) {
                    row[t.def.column_index(c).expect("checked column")] = operand_value(v)?.clone();
                }
                let key = t.key_of(&row);
                if t.rows.contains_key(&key) {
                    let shown: Vec<String> = key.iter().map(|v| v.to_string()).collect();
                    return Err(StoreError::DuplicateKey {
                        table,
                        key: shown.join(","),
                    });
                }
                t.rows.insert(key.clone(), row);
                undo.push(Undo::Inserted(table, key));
                Ok(StmtResult::Affected(1))
            }
            Statement::Delete { filter, .. } => {
                let keys = self.select_keys(&table, filter)?;
                let t = self.tables.get_mut(&table).expect("checked table");
                for k in &keys {
                    let old = t.rows.remove(k).expect("selected row");
                    undo.push(Undo::Deleted(table.clone(), k.clone(), old));
                }
                Ok(StmtResult::Affected(keys.len() as u64))
            }
        }
    }

    /// Undoes entries of `undo` back to length `mark`.
    pub(crate) fn rollback(&mut self, undo: &mut Vec<Undo>, mark: usize) {
        while undo.len() > mark {
            match undo.pop().expect("non-empty") {
                Undo::Inserted(t, k) => {
                    self.tables.get_mut(&t).expect("table").rows.remove(&k);
                }
                Undo::Deleted(t, k, row) | Undo::Updated(t, k, row) => {
                    self.tables.get_mut(&t).expect("table").rows.insert(k, row);
                }
            }
        }
    }

    /// Runs a statement outside any transaction. Statement errors are
    /// returned as [`StmtResult::Error`]; only malformed input is `Err`.
    pub fn execute(&mut self, stmt: &Statement) -> Result<StmtResult, StoreError> {
        let mut undo = Vec::new();
        match self.execute_logged(stmt, &mut undo) {
            Ok(r) => Ok(r),
            Err(e @ (StoreError::DuplicateKey { .. } | StoreError::Type(_))) => {
                Ok(StmtResult::Error(e.to_string()))
            }
            Err(e) => Err(e),
        }
    }

    /// Applies a state update atomically. Any statement error rolls the
    /// whole update back and is reported.
    pub fn apply(&mut self, u: &StateUpdate) -> Result<(), StoreError> {
        let mut undo = Vec::new();
        for s in &u.statements {
            if let Err(e) = self.execute_logged(s, &mut undo) {
                self.rollback(&mut undo, 0);
                return Err(e);
            }
        }
        Ok(())
    }

    /// Canonical text form: tables by name, rows by key, one JSON array
    /// per row.
    pub fn dump(&self) -> String {
        let mut out = String::from("-- conveyor dump v1\n");
        for (name, t) in &self.tables {
            out.push_str(&format!("table {name} {}\n", t.rows.len()));
            for row in t.rows.values() {
                out.push_str(&serde_json::to_string(row).expect("values serialize"));
                out.push('\n');
            }
        }
        out
    }

    /// Reads a [`dump`](Self::dump) back against `schema`.
    pub fn load(schema: Schema, text: &str) -> Result<Self, StoreError> {
        let mut db = Database::new(schema);
        let mut lines = text.lines();
        if lines.next() != Some("-- conveyor dump v1") {
            return Err(StoreError::Dump("missing header".into()));
        }
        while let Some(line) = lines.next() {
            let mut parts = line.split_whitespace();
            let (Some("table"), Some(name), Some(n)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(StoreError::Dump(format!("expected table line, got {line:?}")));
            };
            let n: usize = n.parse().map_err(|_| StoreError::Dump(format!("bad row count {n}")))?;
            for _ in 0..n {
                let row_line = lines
                    .next()
                    .ok_or_else(|| StoreError::Dump(format!("table {name} is truncated")))?;
                let row: Vec<Value> =
                    serde_json::from_str(row_line).map_err(|e| StoreError::Dump(e.to_string()))?;
                db.insert_row(name, row)?;
            }
        }
        Ok(db)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.dump().as_bytes()))
    }

    /// Every row as `(RowRef, values)`, in canonical order.
    pub fn rows(&self) -> impl Iterator<Item = (RowRef, &Vec<Value>)> {
        self.tables.iter().flat_map(|(name, t)| {
            t.rows.iter().map(move |(k, v)| {
                (
                    RowRef {
                        table: name.clone(),
                        key: k.clone(),
                    },
                    v,
                )
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minisql::TableDef;

    fn db() -> Database {
        let schema = Schema::new(vec![
            TableDef::new("SC", &["ID", "I_ID", "QTY"], &["ID", "I_ID"]),
            TableDef::new("ITEMS", &["ID", "NAME", "STOCK"], &["ID"]),
        ])
        .unwrap();
        let mut db = Database::new(schema);
        db.insert_row("ITEMS", vec![9.into(), "book".into(), 10.into()]).unwrap();
        db.insert_row("SC", vec![5.into(), 7.into(), 1.into()]).unwrap();
        db
    }

    fn run(db: &mut Database, sql: &str) -> StmtResult {
        db.execute(&parse_statement(sql).unwrap()).unwrap()
    }

    #[test]
    fn update_select_delete() {
        let mut d = db();
        assert_eq!(run(&mut d, "UPDATE SC SET QTY = 3 WHERE ID = 5 AND I_ID = 7"), StmtResult::Affected(1));
        assert_eq!(
            run(&mut d, "SELECT QTY FROM SC WHERE ID = 5"),
            StmtResult::Rows {
                columns: vec!["QTY".into()],
                rows: vec![vec![3.into()]]
            }
        );
        assert_eq!(run(&mut d, "UPDATE ITEMS SET STOCK = STOCK - 4 WHERE ID = 9"), StmtResult::Affected(1));
        assert_eq!(
            d.row(&RowRef { table: "ITEMS".into(), key: vec![9.into()] }).unwrap()[2],
            Value::Int(6)
        );
        assert_eq!(run(&mut d, "DELETE FROM SC WHERE QTY > 2"), StmtResult::Affected(1));
        assert_eq!(d.table("SC").unwrap().rows.len(), 0);
    }

    #[test]
    fn duplicate_insert_is_a_statement_error() {
        let mut d = db();
        let before = d.digest();
        assert!(matches!(
            run(&mut d, "INSERT INTO ITEMS (ID, NAME) VALUES (9, 'x')"),
            StmtResult::Error(_)
        ));
        assert_eq!(d.digest(), before);
        assert_eq!(run(&mut d, "INSERT INTO ITEMS (ID) VALUES (10)"), StmtResult::Affected(1));
        let row = d.row(&RowRef { table: "ITEMS".into(), key: vec![10.into()] }).unwrap();
        assert_eq!(row, &vec![Value::Int(10), Value::Int(0), Value::Int(0)]);
    }

    #[test]
    fn like_patterns() {
        assert!(like("book", "b%"));
        assert!(like("book", "_oo_"));
        assert!(!like("book", "b_"));
        assert!(like("", "%"));
        let mut d = db();
        assert!(matches!(
            run(&mut d, "SELECT ID FROM ITEMS WHERE NAME LIKE '%ok'"),
            StmtResult::Rows { rows, .. } if rows.len() == 1
        ));
    }

    #[test]
    fn apply_is_atomic() {
        let mut d = db();
        let before = d.clone();
        let u = StateUpdate {
            statements: vec![
                parse_statement("UPDATE ITEMS SET STOCK = 0 WHERE ID = 9").unwrap(),
                parse_statement("INSERT INTO SC (ID, I_ID) VALUES (5, 7)").unwrap(),
            ],
        };
        assert!(d.apply(&u).is_err());
        assert_eq!(d, before);
        assert!(d.apply(&StateUpdate::default()).is_ok());
        assert_eq!(d, before);
    }

    #[test]
    fn dump_round_trip() {
        let mut d = db();
        run(&mut d, "INSERT INTO ITEMS (ID, NAME, STOCK) VALUES (1, 'it''s', -3)");
        let text = d.dump();
        let back = Database::load(d.schema().clone(), &text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.digest(), d.digest());
        assert!(text.starts_with("-- conveyor dump v1\ntable ITEMS 2\n[1,\"it's\",-3]\n"));
    }

    #[test]
    fn update_serializes_as_sql() {
        let u = StateUpdate {
            statements: vec![parse_statement("UPDATE SC SET QTY = 3 WHERE ID = 5 AND I_ID = 7").unwrap()],
        };
        let json = serde_json::to_string(&u).unwrap();
        assert_eq!(json, r#"["UPDATE SC SET QTY = 3 WHERE ID = 5 AND I_ID = 7"]"#);
        assert_eq!(serde_json::from_str::<StateUpdate>(&json).unwrap(), u);
    }
}
