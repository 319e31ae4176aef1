use std::collections::BTreeSet;

use super::lexer::{tokenize, Tok, Token};
use super::{
    Assignment, CmpOp, Operand, Predicate, Projection, SetExpr, SqlError, Statement,
    TransactionTemplate, TEMPLATE_HEADER,
};
use crate::value::Value;

const RESERVED: &[&str] = &[
    "TXN", "WEIGHT", "SELECT", "FROM", "WHERE", "AND", "OR", "UPDATE", "SET", "INSERT", "INTO",
    "VALUES", "DELETE", "LIKE", "JOIN", "ON", "NOT", "IN", "EXISTS", "TRIGGER", "UNION",
];

/// Parses a whole template file: the version header line followed by any
/// number of `TXN` blocks. A blank file holds zero templates.
pub fn parse_templates(src: &str) -> Result<Vec<TransactionTemplate>, SqlError> {
    let Some((idx, first)) = src
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
    else {
        return Ok(Vec::new());
    };
    if first.trim() != TEMPLATE_HEADER {
        return Err(SqlError::Syntax {
            line: idx + 1,
            col: 1,
            msg: format!("expected header line `{TEMPLATE_HEADER}`"),
        });
    }
    let mut p = Parser::new(src)?;
    let mut out = Vec::new();
    while !p.at_eof() {
        out.push(p.template()?);
    }
    let mut names = BTreeSet::new();
    for t in &out {
        if !names.insert(t.name.clone()) {
            return Err(SqlError::Duplicate(t.name.clone()));
        }
    }
    Ok(out)
}

/// Parses exactly one `TXN` block (no header needed).
pub fn parse_template(src: &str) -> Result<TransactionTemplate, SqlError> {
    let mut p = Parser::new(src)?;
    let t = p.template()?;
    if !p.at_eof() {
        return Err(p.error("expected end of input after template"));
    }
    Ok(t)
}

/// Parses a single statement whose operands are all literals, such as a
/// line of a recorded state update.
pub fn parse_statement(src: &str) -> Result<Statement, SqlError> {
    let mut p = Parser::new(src)?;
    let stmt = p.statement()?;
    p.eat_sym(";");
    if !p.at_eof() {
        return Err(p.error("expected end of statement"));
    }
    Ok(stmt)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    params: Option<BTreeSet<String>>,
}

impl Parser {
    fn new(src: &str) -> Result<Self, SqlError> {
        Ok(Parser {
            toks: tokenize(src)?,
            pos: 0,
            params: None,
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if !matches!(t.tok, Tok::Eof) {
            self.pos += 1;
        }
        t
    }

    fn at_eof(&self) -> bool {
        matches!(self.peek().tok, Tok::Eof)
    }

    fn error(&self, msg: impl Into<String>) -> SqlError {
        let t = self.peek();
        SqlError::Syntax {
            line: t.line,
            col: t.col,
            msg: msg.into(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.is_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.error(format!("expected {kw}")))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek().tok, Tok::Sym(s) if s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sym(&mut self, sym: &str) -> Result<(), SqlError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{sym}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, SqlError> {
        match &self.peek().tok {
            Tok::Ident(s) if !RESERVED.iter().any(|r| s.eq_ignore_ascii_case(r)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn template(&mut self) -> Result<TransactionTemplate, SqlError> {
        self.keyword("TXN")?;
        let name = self.ident("transaction name")?;
        self.sym("(")?;
        let mut params = Vec::new();
        if !self.eat_sym(")") {
            loop {
                let p = self.ident("parameter name")?;
                if params.contains(&p) {
                    return Err(self.error(format!("parameter {p} declared twice")));
                }
                params.push(p);
                if self.eat_sym(")") {
                    break;
                }
                self.sym(",")?;
            }
        }
        let mut weight = 1.0;
        if self.eat_keyword("WEIGHT") {
            weight = match self.next().tok {
                Tok::Int(v) if v >= 0 => v as f64,
                _ => return Err(self.error("expected a nonnegative integer weight")),
            };
        }
        self.sym("{")?;
        self.params = Some(params.iter().cloned().collect());
        let mut body = Vec::new();
        loop {
            if self.eat_sym("}") {
                break;
            }
            if self.eat_sym(";") {
                continue;
            }
            body.push(self.statement()?);
            if !self.eat_sym(";") && !matches!(self.peek().tok, Tok::Sym("}")) {
                return Err(self.error("expected `;` after statement"));
            }
        }
        self.params = None;
        Ok(TransactionTemplate::new(name, params, body, weight))
    }

    fn statement(&mut self) -> Result<Statement, SqlError> {
        if self.eat_keyword("SELECT") {
            let columns = if self.eat_sym("*") {
                Projection::All
            } else {
                Projection::Columns(self.ident_list("column")?)
            };
            self.keyword("FROM")?;
            let table = self.table_name()?;
            let filter = self.filter()?;
            Ok(Statement::Select {
                columns,
                table,
                filter,
            })
        } else if self.eat_keyword("UPDATE") {
            let table = self.table_name()?;
            self.keyword("SET")?;
            let mut assignments = Vec::new();
            loop {
                let column = self.ident("column")?;
                self.sym("=")?;
                let expr = self.set_expr()?;
                assignments.push(Assignment { column, expr });
                if !self.eat_sym(",") {
                    break;
                }
            }
            let filter = self.filter()?;
            Ok(Statement::Update {
                table,
                assignments,
                filter,
            })
        } else if self.eat_keyword("INSERT") {
            self.keyword("INTO")?;
            let table = self.table_name()?;
            self.sym("(")?;
            let columns = self.ident_list("column")?;
            self.sym(")")?;
            self.keyword("VALUES")?;
            self.sym("(")?;
            let mut values = vec![self.operand()?];
            while self.eat_sym(",") {
                values.push(self.operand()?);
            }
            self.sym(")")?;
            if values.len() != columns.len() {
                return Err(self.error(format!(
                    "INSERT names {} columns but gives {} values",
                    columns.len(),
                    values.len()
                )));
            }
            Ok(Statement::Insert {
                table,
                columns,
                values,
            })
        } else if self.eat_keyword("DELETE") {
            self.keyword("FROM")?;
            let table = self.table_name()?;
            let filter = self.filter()?;
            Ok(Statement::Delete { table, filter })
        } else {
            Err(self.error("expected SELECT, UPDATE, INSERT or DELETE"))
        }
    }

    fn table_name(&mut self) -> Result<String, SqlError> {
        if matches!(self.peek().tok, Tok::Sym("(")) {
            return Err(self.error("nested queries are not supported"));
        }
        let t = self.ident("table name")?;
        if matches!(self.peek().tok, Tok::Sym(",")) || self.is_keyword("JOIN") {
            return Err(self.error("joins are not supported"));
        }
        Ok(t)
    }

    fn ident_list(&mut self, what: &str) -> Result<Vec<String>, SqlError> {
        let mut out = vec![self.ident(what)?];
        while self.eat_sym(",") {
            out.push(self.ident(what)?);
        }
        Ok(out)
    }

    fn filter(&mut self) -> Result<Vec<Predicate>, SqlError> {
        let mut preds = Vec::new();
        if !self.eat_keyword("WHERE") {
            return Ok(preds);
        }
        loop {
            let column = self.ident("column")?;
            let op = if self.eat_keyword("LIKE") {
                CmpOp::Like
            } else {
                match self.next().tok {
                    Tok::Sym("=") => CmpOp::Eq,
                    Tok::Sym("<>") | Tok::Sym("!=") => CmpOp::Ne,
                    Tok::Sym("<") => CmpOp::Lt,
                    Tok::Sym("<=") => CmpOp::Le,
                    Tok::Sym(">") => CmpOp::Gt,
                    Tok::Sym(">=") => CmpOp::Ge,
                    _ => {
                        self.pos -= 1;
                        return Err(self.error("expected comparison operator"));
                    }
                }
            };
            if matches!(self.peek().tok, Tok::Sym("(")) || self.is_keyword("SELECT") {
                return Err(self.error("nested queries are not supported"));
            }
            let operand = self.operand()?;
            preds.push(Predicate {
                column,
                op,
                operand,
            });
            if self.is_keyword("OR") {
                return Err(self.error("OR is not supported; split into separate statements"));
            }
            if !self.eat_keyword("AND") {
                break;
            }
        }
        Ok(preds)
    }

    fn set_expr(&mut self) -> Result<SetExpr, SqlError> {
        // `col + x` / `col - x`; otherwise a plain operand
        if let Tok::Ident(name) = &self.peek().tok {
            let follows = &self.toks[self.pos + 1].tok;
            if matches!(follows, Tok::Sym("+") | Tok::Sym("-")) {
                let column = name.clone();
                self.pos += 1;
                let plus = matches!(self.next().tok, Tok::Sym("+"));
                let operand = self.operand()?;
                return Ok(if plus {
                    SetExpr::Add(column, operand)
                } else {
                    SetExpr::Sub(column, operand)
                });
            }
        }
        Ok(SetExpr::Value(self.operand()?))
    }

    fn operand(&mut self) -> Result<Operand, SqlError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Int(v) => {
                self.pos += 1;
                Ok(Operand::Const(Value::Int(v)))
            }
            Tok::Str(s) => {
                self.pos += 1;
                Ok(Operand::Const(Value::Str(s)))
            }
            Tok::Sym("-") => {
                self.pos += 1;
                match self.next().tok {
                    Tok::Int(v) => Ok(Operand::Const(Value::Int(-v))),
                    _ => Err(SqlError::Syntax {
                        line: t.line,
                        col: t.col,
                        msg: "expected integer after `-`".into(),
                    }),
                }
            }
            Tok::Ident(_) => {
                let name = self.ident("parameter")?;
                match &self.params {
                    Some(declared) if !declared.contains(&name) => {
                        Err(SqlError::UndeclaredParam {
                            name,
                            line: t.line,
                            col: t.col,
                        })
                    }
                    None => Err(SqlError::Syntax {
                        line: t.line,
                        col: t.col,
                        msg: format!("parameter {name} outside a template"),
                    }),
                    _ => Ok(Operand::Param(name)),
                }
            }
            _ => Err(self.error("expected a parameter or literal")),
        }
    }
}
