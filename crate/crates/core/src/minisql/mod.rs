//! A small SQL subset for describing transaction templates.
//!
//! Template files start with the header line `-- conveyor templates v1` and
//! contain `TXN` blocks:
//!
//! ```text
//! -- conveyor templates v1
//! TXN doCart(sid, iid, q) WEIGHT 2 {
//!     UPDATE SC SET QTY = q WHERE ID = sid AND I_ID = iid;
//! }
//! ```
//!
//! Grammar (keywords are case-insensitive, `--` starts a comment):
//!
//! ```text
//! txn       := TXN name ( [param {, param}] ) [WEIGHT int] { {stmt ;} }
//! stmt      := SELECT (* | col {, col}) FROM table [where]
//!            | UPDATE table SET col = set_expr {, col = set_expr} [where]
//!            | INSERT INTO table ( col {, col} ) VALUES ( operand {, operand} )
//!            | DELETE FROM table [where]
//! set_expr  := operand | col + operand | col - operand
//! where     := WHERE pred {AND pred}
//! pred      := col (= | <> | != | < | <= | > | >= | LIKE) operand
//! operand   := param | integer | 'string'
//! ```
//!
//! Statements end with `;` (optional before the closing brace). `OR`,
//! joins and nested queries are rejected.

mod lexer;
mod parser;
mod schema;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::{Atom, Conjunction, Dnf, Term};
use crate::value::Value;

pub use parser::{parse_statement, parse_template, parse_templates};
pub use schema::{Schema, TableDef, SCHEMA_VERSION};

pub const TEMPLATE_HEADER: &str = "-- conveyor templates v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SqlError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("undeclared parameter {name} at {line}:{col}")]
    UndeclaredParam { name: String, line: usize, col: usize },
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("unknown column {table}.{column}")]
    UnknownColumn { table: String, column: String },
    #[error("duplicate transaction {0}")]
    Duplicate(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("{txn} expects {expected} arguments, got {got}")]
    Arity {
        txn: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Param(String),
    Const(Value),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Param(p) => write!(f, "{p}"),
            Operand::Const(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Like,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Like => "LIKE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: CmpOp,
    pub operand: Operand,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.column, self.op.symbol(), self.operand)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetExpr {
    Value(Operand),
    Add(String, Operand),
    Sub(String, Operand),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub column: String,
    pub expr: SetExpr,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.expr {
            SetExpr::Value(v) => write!(f, "{} = {v}", self.column),
            SetExpr::Add(c, v) => write!(f, "{} = {c} + {v}", self.column),
            SetExpr::Sub(c, v) => write!(f, "{} = {c} - {v}", self.column),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    All,
    Columns(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Statement {
    Select {
        columns: Projection,
        table: String,
        filter: Vec<Predicate>,
    },
    Update {
        table: String,
        assignments: Vec<Assignment>,
        filter: Vec<Predicate>,
    },
    Insert {
        table: String,
        columns: Vec<String>,
        values: Vec<Operand>,
    },
    Delete {
        table: String,
        filter: Vec<Predicate>,
    },
}

fn write_filter(f: &mut fmt::Formatter<'_>, filter: &[Predicate]) -> fmt::Result {
    for (i, p) in filter.iter().enumerate() {
        write!(f, "{}{p}", if i == 0 { " WHERE " } else { " AND " })?;
    }
    Ok(())
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::Select {
                columns,
                table,
                filter,
            } => {
                let cols = match columns {
                    Projection::All => "*".to_string(),
                    Projection::Columns(c) => c.join(", "),
                };
                write!(f, "SELECT {cols} FROM {table}")?;
                write_filter(f, filter)
            }
            Statement::Update {
                table,
                assignments,
                filter,
            } => {
                write!(f, "UPDATE {table} SET {}", join(assignments))?;
                write_filter(f, filter)
            }
            Statement::Insert {
                table,
                columns,
                values,
            } => write!(
                f,
                "INSERT INTO {table} ({}) VALUES ({})",
                columns.join(", "),
                join(values)
            ),
            Statement::Delete { table, filter } => {
                write!(f, "DELETE FROM {table}")?;
                write_filter(f, filter)
            }
        }
    }
}

impl Statement {
    pub fn table(&self) -> &str {
        match self {
            Statement::Select { table, .. }
            | Statement::Update { table, .. }
            | Statement::Insert { table, .. }
            | Statement::Delete { table, .. } => table,
        }
    }

    pub fn is_mutation(&self) -> bool {
        !matches!(self, Statement::Select { .. })
    }

    pub fn filter(&self) -> &[Predicate] {
        match self {
            Statement::Select { filter, .. }
            | Statement::Update { filter, .. }
            | Statement::Delete { filter, .. } => filter,
            Statement::Insert { .. } => &[],
        }
    }

    fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Statement::Select { filter, .. } | Statement::Delete { filter, .. } => {
                filter.iter_mut().map(|p| &mut p.operand).collect()
            }
            Statement::Update {
                assignments,
                filter,
                ..
            } => assignments
                .iter_mut()
                .map(|a| match &mut a.expr {
                    SetExpr::Value(o) | SetExpr::Add(_, o) | SetExpr::Sub(_, o) => o,
                })
                .chain(filter.iter_mut().map(|p| &mut p.operand))
                .collect(),
            Statement::Insert { values, .. } => values.iter_mut().collect(),
        }
    }

    /// True when no parameter is left unbound.
    pub fn is_concrete(&self) -> bool {
        let mut s = self.clone();
        s.operands_mut()
            .iter()
            .all(|o| matches!(o, Operand::Const(_)))
    }

    /// Checks table and column references against `schema`.
    pub fn check(&self, schema: &Schema) -> Result<(), SqlError> {
        let def = schema.require(self.table())?;
        let col = |c: &str| -> Result<(), SqlError> {
            if def.has_column(c) {
                Ok(())
            } else {
                Err(SqlError::UnknownColumn {
                    table: def.name.clone(),
                    column: c.to_string(),
                })
            }
        };
        for p in self.filter() {
            col(&p.column)?;
        }
        match self {
            Statement::Select { columns, .. } => {
                if let Projection::Columns(cs) = columns {
                    for c in cs {
                        col(c)?;
                    }
                }
            }
            Statement::Update { assignments, .. } => {
                for a in assignments {
                    col(&a.column)?;
                    if def.is_key_column(&a.column) {
                        return Err(SqlError::Unsupported(format!(
                            "UPDATE may not assign key column {}.{}",
                            def.name, a.column
                        )));
                    }
                    if let SetExpr::Add(c, _) | SetExpr::Sub(c, _) = &a.expr {
                        col(c)?;
                    }
                }
            }
            Statement::Insert { columns, .. } => {
                let mut seen = BTreeSet::new();
                for c in columns {
                    col(c)?;
                    if !seen.insert(c) {
                        return Err(SqlError::Unsupported(format!("INSERT repeats column {c}")));
                    }
                }
                for k in &def.key {
                    if !seen.contains(k) {
                        return Err(SqlError::Unsupported(format!(
                            "INSERT into {} must bind key column {k}",
                            def.name
                        )));
                    }
                }
            }
            Statement::Delete { .. } => {}
        }
        Ok(())
    }
}

/// One entry `<A, C>` of a read or write set: the accessed attributes of one
/// table and the condition selecting the rows they belong to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEntry {
    pub table: String,
    pub attributes: BTreeSet<String>,
    pub condition: Dnf,
}

impl AccessEntry {
    /// Whether the attribute sets overlap. Attributes are table-qualified,
    /// so entries on different tables never intersect.
    pub fn intersects(&self, other: &AccessEntry) -> bool {
        self.table == other.table && !self.attributes.is_disjoint(&other.attributes)
    }
}

impl fmt::Display for AccessEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let attrs: Vec<String> = self
            .attributes
            .iter()
            .map(|a| format!("{}.{a}", self.table))
            .collect();
        write!(f, "<{{{}}}, {}>", attrs.join(", "), self.condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionTemplate {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Statement>,
    pub weight: f64,
    pub read_set: Vec<AccessEntry>,
    pub write_set: Vec<AccessEntry>,
}

impl TransactionTemplate {
    pub fn new(name: String, params: Vec<String>, body: Vec<Statement>, weight: f64) -> Self {
        TransactionTemplate {
            name,
            params,
            body,
            weight,
            read_set: Vec::new(),
            write_set: Vec::new(),
        }
    }

    pub fn is_read_only(&self) -> bool {
        self.body.iter().all(|s| !s.is_mutation())
    }

    /// Returns a copy with read and write sets computed from the body, one
    /// entry per statement regardless of control flow.
    pub fn derive_access_sets(&self, schema: &Schema) -> Result<TransactionTemplate, SqlError> {
        let mut read_set = Vec::new();
        let mut write_set = Vec::new();
        for stmt in &self.body {
            stmt.check(schema)?;
            let def = schema.require(stmt.table())?;
            let all: BTreeSet<String> = def.columns.iter().cloned().collect();
            let table = def.name.clone();
            match stmt {
                Statement::Select {
                    columns, filter, ..
                } => {
                    let attributes = match columns {
                        Projection::All => all,
                        Projection::Columns(cs) => cs.iter().cloned().collect(),
                    };
                    read_set.push(AccessEntry {
                        condition: filter_condition(&table, filter),
                        table,
                        attributes,
                    });
                }
                Statement::Update {
                    assignments,
                    filter,
                    ..
                } => write_set.push(AccessEntry {
                    attributes: assignments.iter().map(|a| a.column.clone()).collect(),
                    condition: filter_condition(&table, filter),
                    table,
                }),
                Statement::Insert {
                    columns, values, ..
                } => {
                    let atoms = columns
                        .iter()
                        .zip(values)
                        .map(|(c, v)| Atom::eq(Term::attr(&table, c), operand_term(v)))
                        .collect();
                    write_set.push(AccessEntry {
                        condition: Dnf::clause(Conjunction::new(atoms)),
                        table,
                        attributes: all,
                    });
                }
                Statement::Delete { filter, .. } => write_set.push(AccessEntry {
                    condition: filter_condition(&table, filter),
                    table,
                    attributes: all,
                }),
            }
        }
        Ok(TransactionTemplate {
            read_set,
            write_set,
            ..self.clone()
        })
    }

    /// Substitutes `args` for the parameters, producing concrete statements.
    pub fn bind(&self, args: &[Value]) -> Result<Vec<Statement>, SqlError> {
        if args.len() != self.params.len() {
            return Err(SqlError::Arity {
                txn: self.name.clone(),
                expected: self.params.len(),
                got: args.len(),
            });
        }
        let mut out = self.body.clone();
        for stmt in &mut out {
            for op in stmt.operands_mut() {
                if let Operand::Param(p) = op {
                    let idx = self
                        .params
                        .iter()
                        .position(|x| x == p)
                        .expect("parser checks declarations");
                    *op = Operand::Const(args[idx].clone());
                }
            }
        }
        Ok(out)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p == name)
    }
}

impl fmt::Display for TransactionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TXN {}({})", self.name, self.params.join(", "))?;
        if self.weight != 1.0 {
            write!(f, " WEIGHT {}", self.weight)?;
        }
        writeln!(f, " {{")?;
        for s in &self.body {
            writeln!(f, "    {s};")?;
        }
        write!(f, "}}")
    }
}

/// Renders templates back into a file accepted by [`parse_templates`].
pub fn print_templates(templates: &[TransactionTemplate]) -> String {
    let mut out = format!("{TEMPLATE_HEADER}\n");
    for t in templates {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

fn operand_term(op: &Operand) -> Term {
    match op {
        Operand::Param(p) => Term::param(p),
        Operand::Const(v) => Term::Const(v.clone()),
    }
}

fn filter_condition(table: &str, filter: &[Predicate]) -> Dnf {
    let atoms = filter
        .iter()
        .map(|p| match p.op {
            CmpOp::Eq => Atom::eq(Term::attr(table, &p.column), operand_term(&p.operand)),
            _ => Atom::Opaque(format!("{table}.{p}")),
        })
        .collect();
    Dnf::clause(Conjunction::new(atoms))
}
