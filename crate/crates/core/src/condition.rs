//! Conflict conditions in disjunctive normal form.
//!
//! A condition is a disjunction of conjunctions of equality atoms over
//! table attributes, transaction parameters and constants. Satisfiability of
//! a conjunction is decided by union-find over its terms: a clause is
//! unsatisfiable exactly when two distinct constants end up in one class.
//! Atoms that are not equalities are kept as opaque text and never falsify a
//! clause.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::Value;

/// Which side of a transaction pair a parameter belongs to. Distinguishes
/// `sid` from `sid'` when a transaction conflicts with itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instance {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Attr { table: String, column: String },
    Param { instance: Instance, name: String },
    Const(Value),
}

impl Term {
    pub fn attr(table: &str, column: &str) -> Term {
        debug_assert!(!table.is_empty() && !column.is_empty());
        Term::Attr {
            table: table.to_string(),
            column: column.to_string(),
        }
    }

    pub fn param(name: &str) -> Term {
        Term::param_of(Instance::First, name)
    }

    pub fn param_of(instance: Instance, name: &str) -> Term {
        debug_assert!(!name.is_empty());
        Term::Param {
            instance,
            name: name.to_string(),
        }
    }

    pub fn int(v: i64) -> Term {
        Term::Const(Value::Int(v))
    }

    pub fn is_attr(&self) -> bool {
        matches!(self, Term::Attr { .. })
    }

    fn substitute(&self, bind: &dyn Fn(Instance, &str) -> Option<Value>) -> Term {
        match self {
            Term::Param { instance, name } => bind(*instance, name).map_or_else(|| self.clone(), Term::Const),
            other => other.clone(),
        }
    }

    fn with_instance(&self, to: Instance) -> Term {
        match self {
            Term::Param { name, .. } => Term::Param {
                instance: to,
                name: name.clone(),
            },
            other => other.clone(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Attr { table, column } => write!(f, "{table}.{column}"),
            Term::Param {
                instance: Instance::First,
                name,
            } => write!(f, "{name}"),
            Term::Param {
                instance: Instance::Second,
                name,
            } => write!(f, "{name}'"),
            Term::Const(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Atom {
    Eq(Term, Term),
    Opaque(String),
}

impl Atom {
    pub fn eq(lhs: Term, rhs: Term) -> Atom {
        Atom::Eq(lhs, rhs)
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Eq(a, b) => write!(f, "{a} = {b}"),
            Atom::Opaque(text) => write!(f, "[{text}]"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conjunction {
    pub atoms: Vec<Atom>,
}

impl Conjunction {
    pub fn new(atoms: Vec<Atom>) -> Self {
        Conjunction { atoms }
    }

    /// The empty conjunction, i.e. TRUE.
    pub fn truth() -> Self {
        Conjunction::default()
    }

    pub fn and(&self, other: &Conjunction) -> Conjunction {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().cloned());
        Conjunction { atoms }
    }

    pub fn is_satisfiable(&self) -> bool {
        Closure::of(self).is_consistent()
    }

    /// Re-tags every parameter with `instance`.
    pub fn with_instance(&self, instance: Instance) -> Conjunction {
        let atoms = self
            .atoms
            .iter()
            .map(|atom| match atom {
                Atom::Eq(a, b) => Atom::Eq(a.with_instance(instance), b.with_instance(instance)),
                Atom::Opaque(s) => Atom::Opaque(s.clone()),
            })
            .collect();
        Conjunction { atoms }
    }

    /// Replaces each parameter for which `bind` has a value by that value.
    pub fn substitute(&self, bind: &dyn Fn(Instance, &str) -> Option<Value>) -> Conjunction {
        let atoms = self
            .atoms
            .iter()
            .map(|atom| match atom {
                Atom::Eq(a, b) => Atom::Eq(a.substitute(bind), b.substitute(bind)),
                Atom::Opaque(s) => Atom::Opaque(s.clone()),
            })
            .collect();
        Conjunction { atoms }
    }

    /// Does the equality closure of this clause force both `k` and `k2`
    /// to equal one common table attribute?
    pub fn colocates(&self, k: &Term, k2: &Term) -> bool {
        let mut closure = Closure::of(self);
        let (Some(a), Some(b)) = (closure.find_term(k), closure.find_term(k2)) else {
            return false;
        };
        a == b && closure.class_has_attr(a)
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.atoms.iter().flat_map(|atom| match atom {
            Atom::Eq(a, b) => vec![a, b],
            Atom::Opaque(_) => vec![],
        })
    }
}

impl fmt::Display for Conjunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return write!(f, "TRUE");
        }
        for (i, atom) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, " AND ")?;
            }
            write!(f, "{atom}")?;
        }
        Ok(())
    }
}

/// A condition in disjunctive normal form. No clauses means FALSE.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dnf {
    pub clauses: Vec<Conjunction>,
}

impl Dnf {
    pub fn falsity() -> Self {
        Dnf::default()
    }

    pub fn truth() -> Self {
        Dnf {
            clauses: vec![Conjunction::truth()],
        }
    }

    pub fn clause(c: Conjunction) -> Self {
        Dnf { clauses: vec![c] }
    }

    /// `a AND b`, distributed back into DNF.
    pub fn conjoin(&self, other: &Dnf) -> Dnf {
        let mut clauses = Vec::with_capacity(self.clauses.len() * other.clauses.len());
        for a in &self.clauses {
            for b in &other.clauses {
                clauses.push(a.and(b));
            }
        }
        Dnf { clauses }
    }

    /// `a OR b` as a clause multiset union.
    pub fn disjoin(&self, other: &Dnf) -> Dnf {
        let mut clauses = self.clauses.clone();
        clauses.extend(other.clauses.iter().cloned());
        Dnf { clauses }
    }

    pub fn is_satisfiable(&self) -> bool {
        self.clauses.iter().any(Conjunction::is_satisfiable)
    }

    /// Drops every clause whose closure implies `k = A` and `k2 = A` for some
    /// attribute `A`. Such conflicts only arise between operations routed to
    /// the same server.
    pub fn remove_colocated_clauses(&self, k: &Term, k2: &Term) -> Dnf {
        Dnf {
            clauses: self
                .clauses
                .iter()
                .filter(|c| !c.colocates(k, k2))
                .cloned()
                .collect(),
        }
    }

    pub fn is_false(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn substitute(&self, bind: &dyn Fn(Instance, &str) -> Option<Value>) -> Dnf {
        Dnf {
            clauses: self.clauses.iter().map(|c| c.substitute(bind)).collect(),
        }
    }
}

impl fmt::Display for Dnf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.clauses.is_empty() {
            return write!(f, "FALSE");
        }
        for (i, clause) in self.clauses.iter().enumerate() {
            if i > 0 {
                write!(f, " OR ")?;
            }
            write!(f, "({clause})")?;
        }
        Ok(())
    }
}

/// Union-find over the terms of one conjunction.
struct Closure<'a> {
    index: BTreeMap<&'a Term, usize>,
    terms: Vec<&'a Term>,
    parent: Vec<usize>,
}

impl<'a> Closure<'a> {
    fn of(clause: &'a Conjunction) -> Self {
        let mut closure = Closure {
            index: BTreeMap::new(),
            terms: Vec::new(),
            parent: Vec::new(),
        };
        for atom in &clause.atoms {
            if let Atom::Eq(a, b) = atom {
                let x = closure.intern(a);
                let y = closure.intern(b);
                closure.union(x, y);
            }
        }
        closure
    }

    fn intern(&mut self, term: &'a Term) -> usize {
        if let Some(&id) = self.index.get(term) {
            return id;
        }
        let id = self.terms.len();
        self.index.insert(term, id);
        self.terms.push(term);
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, x: usize, y: usize) {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx != ry {
            self.parent[rx.max(ry)] = rx.min(ry);
        }
    }

    fn find_term(&mut self, term: &Term) -> Option<usize> {
        let id = *self.index.get(term)?;
        Some(self.find(id))
    }

    fn is_consistent(&mut self) -> bool {
        let mut constant_of: BTreeMap<usize, &Value> = BTreeMap::new();
        for id in 0..self.terms.len() {
            if let Term::Const(v) = self.terms[id] {
                let root = self.find(id);
                match constant_of.get(&root) {
                    Some(existing) if *existing != v => return false,
                    _ => {
                        constant_of.insert(root, v);
                    }
                }
            }
        }
        true
    }

    fn class_has_attr(&mut self, root: usize) -> bool {
        (0..self.terms.len()).any(|id| self.terms[id].is_attr() && self.find(id) == root)
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn substitution_decides_concrete_conflicts() {
        let c = Dnf::clause(Conjunction::new(vec![
            Atom::eq(Term::attr("T", "K"), Term::param_of(Instance::First, "k")),
            Atom::eq(Term::attr("T", "K"), Term::param_of(Instance::Second, "k")),
        ]));
        let bind = |a: i64, b: i64| {
            move |i: Instance, _: &str| Some(Value::Int(if i == Instance::First { a } else { b }))
        };
        assert!(c.substitute(&bind(3, 3)).is_satisfiable());
        assert!(!c.substitute(&bind(3, 4)).is_satisfiable());
        assert!(c.substitute(&|_, _| None).is_satisfiable());
    }

    use super::*;

    fn eq(a: Term, b: Term) -> Atom {
        Atom::eq(a, b)
    }

    fn sid() -> Term {
        Term::param("sid")
    }
    fn sid2() -> Term {
        Term::param_of(Instance::Second, "sid")
    }
    fn iid2() -> Term {
        Term::param_of(Instance::Second, "iid")
    }

    fn worked_example() -> (Dnf, Dnf) {
        let create = Dnf::clause(Conjunction::new(vec![eq(Term::attr("SC", "ID"), sid())]));
        let do_cart = Dnf::clause(Conjunction::new(vec![
            eq(Term::attr("SC", "ID"), sid2()),
            eq(Term::attr("SC", "I_ID"), iid2()),
        ]));
        (create, do_cart)
    }

    #[test]
    fn conjoin_worked_example_gives_one_clause() {
        let (a, b) = worked_example();
        let c = a.conjoin(&b);
        assert_eq!(c.clauses.len(), 1);
        assert_eq!(c.clauses[0].atoms.len(), 3);
        assert_eq!(c.to_string(), "(SC.ID = sid AND SC.ID = sid' AND SC.I_ID = iid')");
        assert!(c.is_satisfiable());
    }

    #[test]
    fn conjoin_identity_and_annihilator() {
        let (a, _) = worked_example();
        assert_eq!(Dnf::truth().conjoin(&a), a);
        assert!(Dnf::falsity().conjoin(&a).is_false());
        assert!(a.conjoin(&Dnf::falsity()).is_false());
    }

    #[test]
    fn disjoin_is_union() {
        let (a, b) = worked_example();
        assert_eq!(Dnf::falsity().disjoin(&a), a);
        let both = a.disjoin(&b);
        assert_eq!(both.clauses, vec![a.clauses[0].clone(), b.clauses[0].clone()]);
        assert_eq!(a.disjoin(&a).is_satisfiable(), a.is_satisfiable());
    }

    #[test]
    fn constant_clash_is_unsatisfiable() {
        let x = Term::attr("T", "X");
        let c = Conjunction::new(vec![eq(x.clone(), Term::int(1)), eq(x, Term::int(2))]);
        assert!(!c.is_satisfiable());
        assert!(!Dnf::clause(c).is_satisfiable());
    }

    #[test]
    fn opaque_atoms_never_falsify() {
        let c = Conjunction::new(vec![Atom::Opaque("T.X > p".into())]);
        assert!(c.is_satisfiable());
        assert!(Conjunction::truth().is_satisfiable());
        assert!(!Dnf::falsity().is_satisfiable());
    }

    #[test]
    fn equality_is_symmetric() {
        let x = Term::attr("T", "X");
        let a = Conjunction::new(vec![eq(x.clone(), Term::int(1)), eq(Term::int(2), x.clone())]);
        let b = Conjunction::new(vec![eq(Term::int(1), x.clone()), eq(x, Term::int(2))]);
        assert_eq!(a.is_satisfiable(), b.is_satisfiable());
    }

    #[test]
    fn removal_of_worked_example() {
        let (a, b) = worked_example();
        let c = a.conjoin(&b);
        let removed = c.remove_colocated_clauses(&sid(), &sid2());
        assert!(removed.is_false());
    }

    #[test]
    fn removal_requires_common_attribute() {
        let (a, b) = worked_example();
        let c = a.conjoin(&b);
        // sid bound to SC.ID, iid' bound to SC.I_ID.
        assert_eq!(c.remove_colocated_clauses(&sid(), &iid2()), c);
    }

    #[test]
    fn removal_follows_transitive_equalities() {
        let x = Term::param("x");
        let c = Dnf::clause(Conjunction::new(vec![
            eq(sid(), x.clone()),
            eq(x, Term::attr("SC", "ID")),
            eq(sid2(), Term::attr("SC", "ID")),
        ]));
        assert!(c.remove_colocated_clauses(&sid(), &sid2()).is_false());
    }

    #[test]
    fn removal_ignores_params_equal_only_through_constants() {
        let c = Dnf::clause(Conjunction::new(vec![
            eq(sid(), Term::int(4)),
            eq(sid2(), Term::int(4)),
        ]));
        assert_eq!(c.remove_colocated_clauses(&sid(), &sid2()), c);
    }
}
