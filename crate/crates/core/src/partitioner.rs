//! Conflict detection, choice of partitioning parameters, and classification
//! of transactions into commutative, local and global.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::{Dnf, Instance, Term};
use crate::minisql::{AccessEntry, TransactionTemplate};
use crate::value::stable_hash_str;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("search space of {size} candidates exceeds the cap of {cap}")]
    SearchSpace { size: u128, cap: u64 },
    #[error("unknown transaction {0}")]
    UnknownTransaction(String),
    #[error("{txn} has no parameter {param}")]
    UnknownParameter { txn: String, param: String },
    #[error("invalid weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    WriteWrite,
    /// `t` reads what `t2` writes.
    LeftReadsRight,
    /// `t2` reads what `t` writes.
    RightReadsLeft,
}

/// A satisfiable conflict between two templates. Parameters of `t` carry
/// [`Instance::First`] and those of `t2` carry [`Instance::Second`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub t: String,
    pub t2: String,
    pub kind: ConflictKind,
    pub condition: Dnf,
}

impl ConflictRecord {
    /// The transactions whose writes this record is about.
    pub fn writers(&self) -> Vec<&str> {
        match self.kind {
            ConflictKind::WriteWrite => vec![&self.t, &self.t2],
            ConflictKind::LeftReadsRight => vec![&self.t2],
            ConflictKind::RightReadsLeft => vec![&self.t],
        }
    }

    pub fn is_reads_from(&self) -> bool {
        self.kind != ConflictKind::WriteWrite
    }

    pub fn involves(&self, name: &str) -> bool {
        self.t == name || self.t2 == name
    }
}

impl fmt::Display for ConflictRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ConflictKind::WriteWrite => format!("{} ww {}", self.t, self.t2),
            ConflictKind::LeftReadsRight => format!("{} reads-from {}", self.t, self.t2),
            ConflictKind::RightReadsLeft => format!("{} reads-from {}", self.t2, self.t),
        };
        write!(f, "{kind}: {}", self.condition)
    }
}

fn entry_pairs(xs: &[AccessEntry], ys: &[AccessEntry]) -> Dnf {
    let mut acc = Dnf::falsity();
    for x in xs {
        for y in ys {
            if x.intersects(y) {
                let c = Dnf {
                    clauses: x
                        .condition
                        .clauses
                        .iter()
                        .map(|c| c.with_instance(Instance::First))
                        .collect(),
                };
                let c2 = Dnf {
                    clauses: y
                        .condition
                        .clauses
                        .iter()
                        .map(|c| c.with_instance(Instance::Second))
                        .collect(),
                };
                acc = acc.disjoin(&c.conjoin(&c2));
            }
        }
    }
    acc
}

/// Builds the conflict records for every unordered pair of templates,
/// including each template paired with itself. Unsatisfiable clauses are
/// dropped and only satisfiable records are returned.
pub fn detect_conflicts(templates: &[TransactionTemplate]) -> Vec<ConflictRecord> {
    let mut out = Vec::new();
    for (i, a) in templates.iter().enumerate() {
        for b in &templates[i..] {
            let same = a.name == b.name;
            let mut kinds = vec![
                (ConflictKind::WriteWrite, entry_pairs(&a.write_set, &b.write_set)),
                (ConflictKind::LeftReadsRight, entry_pairs(&a.read_set, &b.write_set)),
            ];
            if !same {
                // b reads from a: b's read entries on the Second side
                let c = entry_pairs(&a.write_set, &b.read_set);
                kinds.push((ConflictKind::RightReadsLeft, c));
            }
            for (kind, condition) in kinds {
                let condition = Dnf {
                    clauses: condition
                        .clauses
                        .into_iter()
                        .filter(|c| c.is_satisfiable())
                        .collect(),
                };
                if !condition.is_false() {
                    out.push(ConflictRecord {
                        t: a.name.clone(),
                        t2: b.name.clone(),
                        kind,
                        condition,
                    });
                }
            }
        }
    }
    out
}

/// The array `P`: partitioning parameters per transaction. Missing entries
/// and empty lists both mean "unpartitioned".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitioningArray {
    pub assignment: BTreeMap<String, Vec<String>>,
}

impl PartitioningArray {
    pub fn params(&self, txn: &str) -> &[String] {
        self.assignment.get(txn).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn set(&mut self, txn: &str, params: &[&str]) {
        self.assignment.insert(
            txn.to_string(),
            params.iter().map(|p| p.to_string()).collect(),
        );
    }

    pub fn validate(&self, templates: &[TransactionTemplate]) -> Result<(), PartitionError> {
        for (txn, params) in &self.assignment {
            let t = templates
                .iter()
                .find(|t| &t.name == txn)
                .ok_or_else(|| PartitionError::UnknownTransaction(txn.clone()))?;
            for p in params {
                if t.param_index(p).is_none() {
                    return Err(PartitionError::UnknownParameter {
                        txn: txn.clone(),
                        param: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Applies clause removal for every pairing of assigned parameters.
fn reduce(condition: &Dnf, ks: &[String], ks2: &[String]) -> Dnf {
    let mut c = condition.clone();
    for k in ks {
        for k2 in ks2 {
            c = c.remove_colocated_clauses(
                &Term::param_of(Instance::First, k),
                &Term::param_of(Instance::Second, k2),
            );
        }
    }
    c
}

/// Records that still hold after clause removal under `p`, with their
/// reduced conditions.
pub fn residual_conflicts(p: &PartitioningArray, conflicts: &[ConflictRecord]) -> Vec<ConflictRecord> {
    conflicts
        .iter()
        .filter_map(|r| {
            let condition = reduce(&r.condition, p.params(&r.t), p.params(&r.t2));
            condition.is_satisfiable().then(|| ConflictRecord {
                condition,
                ..r.clone()
            })
        })
        .collect()
}

fn weight_of(templates: &[TransactionTemplate], name: &str) -> f64 {
    templates
        .iter()
        .find(|t| t.name == name)
        .map(|t| t.weight)
        .unwrap_or(1.0)
}

/// Sum of `weight(t) + weight(t')` over the ordered pairs whose conflict
/// condition survives clause removal. The ordered pair `(t, t')` is in
/// conflict when `t` reads from `t'` or the two write-write conflict.
pub fn cost(p: &PartitioningArray, conflicts: &[ConflictRecord], templates: &[TransactionTemplate]) -> f64 {
    let residual = residual_conflicts(p, conflicts);
    let mut ordered: BTreeSet<(&str, &str)> = BTreeSet::new();
    for r in &residual {
        match r.kind {
            ConflictKind::WriteWrite => {
                ordered.insert((&r.t, &r.t2));
                ordered.insert((&r.t2, &r.t));
            }
            ConflictKind::LeftReadsRight => {
                ordered.insert((&r.t, &r.t2));
            }
            ConflictKind::RightReadsLeft => {
                ordered.insert((&r.t2, &r.t));
            }
        }
    }
    ordered
        .iter()
        .map(|(a, b)| weight_of(templates, a) + weight_of(templates, b))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Upper bound on candidate arrays per connected component.
    pub max_candidates: u64,
    /// Largest number of parameters tried for one transaction.
    pub max_params_per_txn: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_candidates: 10_000_000,
            max_params_per_txn: 1,
        }
    }
}

/// Transactions that never take part in a reads-from conflict. Whatever they
/// write is never observed, so they can run anywhere.
pub fn commutative_set(templates: &[TransactionTemplate], conflicts: &[ConflictRecord]) -> BTreeSet<String> {
    let mut involved = BTreeSet::new();
    for r in conflicts.iter().filter(|r| r.is_reads_from()) {
        involved.insert(r.t.as_str());
        involved.insert(r.t2.as_str());
    }
    templates
        .iter()
        .filter(|t| !involved.contains(t.name.as_str()))
        .map(|t| t.name.clone())
        .collect()
}

/// Parameters of `txn` that appear in an equality of some record it is part
/// of. Others can never remove a clause.
fn useful_params(t: &TransactionTemplate, conflicts: &[ConflictRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    for r in conflicts {
        for (side, inst) in [(&r.t, Instance::First), (&r.t2, Instance::Second)] {
            if side != &t.name {
                continue;
            }
            for c in &r.condition.clauses {
                for term in c.terms() {
                    if let Term::Param { instance, name } = term {
                        if *instance == inst {
                            seen.insert(name.clone());
                        }
                    }
                }
            }
        }
    }
    t.params.iter().filter(|p| seen.contains(*p)).cloned().collect()
}

/// Candidate assignments for one transaction: none, then singletons in
/// declaration order, then larger subsets up to `max`.
fn options(params: &[String], max: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for size in 1..=max.min(params.len()) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&i| params[i].clone()).collect());
            // next combination in lexicographic order
            let mut i = size;
            while i > 0 && idx[i - 1] == params.len() - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// One ordered pair of transactions and the records that put it in conflict.
struct Unit {
    a: usize,
    b: usize,
    weight: f64,
    /// `survives[oa][ob]`
    survives: Vec<Vec<bool>>,
    /// Transactions made global when the unit survives.
    writers: Vec<usize>,
}

struct Search<'a> {
    opts: &'a [Vec<Vec<String>>],
    units: &'a [Unit],
    /// Units to evaluate once position `i` is assigned.
    due: Vec<Vec<usize>>,
    choice: Vec<usize>,
    best: Option<(f64, usize, Vec<usize>)>,
}

impl Search<'_> {
    fn run(&mut self, pos: usize, partial: f64) {
        if let Some((best, _, _)) = &self.best {
            if partial > *best + 1e-9 {
                return;
            }
        }
        if pos == self.opts.len() {
            let mut globals = BTreeSet::new();
            for u in self.units {
                if u.survives[self.choice[u.a]][self.choice[u.b]] {
                    globals.extend(u.writers.iter().copied());
                }
            }
            let cand = (partial, globals.len(), self.choice.clone());
            let better = match &self.best {
                None => true,
                Some((c, g, p)) => {
                    if (cand.0 - c).abs() > 1e-9 {
                        cand.0 < *c
                    } else if cand.1 != *g {
                        cand.1 < *g
                    } else {
                        cand.2 < *p
                    }
                }
            };
            if better {
                self.best = Some(cand);
            }
            return;
        }
        for o in 0..self.opts[pos].len() {
            self.choice[pos] = o;
            let mut add = 0.0;
            for &u in &self.due[pos] {
                let u = &self.units[u];
                if u.survives[self.choice[u.a]][self.choice[u.b]] {
                    add += u.weight;
                }
            }
            self.run(pos + 1, partial + add);
        }
    }
}

/// Finds an array `P` of minimal cost by exhaustive search, one connected
/// component of the conflict graph at a time. Records that involve a
/// commutative transaction are ignored. Ties go to fewer global
/// transactions, then to the lexicographically smallest choice vector in
/// template order, where "no parameter" sorts first.
pub fn optimize_partitioning(
    templates: &[TransactionTemplate],
    conflicts: &[ConflictRecord],
    config: &OptimizerConfig,
) -> Result<PartitioningArray, PartitionError> {
    let commutative = commutative_set(templates, conflicts);
    let relevant: Vec<ConflictRecord> = conflicts
        .iter()
        .filter(|r| !commutative.contains(&r.t) && !commutative.contains(&r.t2))
        .cloned()
        .collect();
    let index: BTreeMap<&str, usize> = templates
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.as_str(), i))
        .collect();

    // union-find over transactions for the components
    let mut parent: Vec<usize> = (0..templates.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for r in &relevant {
        let (a, b) = (find(&mut parent, index[r.t.as_str()]), find(&mut parent, index[r.t2.as_str()]));
        parent[a.max(b)] = a.min(b);
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (t, tt) in templates.iter().enumerate() {
        if relevant.iter().any(|r| r.involves(&tt.name)) {
            let root = find(&mut parent, t);
            components.entry(root).or_default().push(t);
        }
    }

    let mut result = PartitioningArray::default();
    for t in templates {
        result.assignment.insert(t.name.clone(), Vec::new());
    }

    for members in components.values() {
        let pos_of: BTreeMap<usize, usize> =
            members.iter().enumerate().map(|(p, &t)| (t, p)).collect();
        let opts: Vec<Vec<Vec<String>>> = members
            .iter()
            .map(|&t| options(&useful_params(&templates[t], &relevant), config.max_params_per_txn))
            .collect();
        let size: u128 = opts.iter().map(|o| o.len() as u128).product();
        if size > config.max_candidates as u128 {
            return Err(PartitionError::SearchSpace {
                size,
                cap: config.max_candidates,
            });
        }

        // group records into ordered pairs
        let mut grouped: BTreeMap<(usize, usize), Vec<(&ConflictRecord, bool)>> = BTreeMap::new();
        for r in &relevant {
            let (Some(&a), Some(&b)) = (pos_of.get(&index[r.t.as_str()]), pos_of.get(&index[r.t2.as_str()])) else {
                continue;
            };
            match r.kind {
                ConflictKind::WriteWrite => {
                    grouped.entry((a, b)).or_default().push((r, false));
                    if a != b {
                        grouped.entry((b, a)).or_default().push((r, true));
                    }
                }
                ConflictKind::LeftReadsRight => grouped.entry((a, b)).or_default().push((r, false)),
                ConflictKind::RightReadsLeft => grouped.entry((b, a)).or_default().push((r, true)),
            }
        }
        let mut units = Vec::new();
        for ((a, b), recs) in grouped {
            let mut survives = vec![vec![false; opts[b].len()]; opts[a].len()];
            for (oa, pa) in opts[a].iter().enumerate() {
                for (ob, pb) in opts[b].iter().enumerate() {
                    survives[oa][ob] = recs.iter().any(|(r, flipped)| {
                        let (k, k2) = if *flipped { (pb, pa) } else { (pa, pb) };
                        reduce(&r.condition, k, k2).is_satisfiable()
                    });
                }
            }
            let mut writers = BTreeSet::new();
            for (r, _) in &recs {
                for w in r.writers() {
                    writers.insert(pos_of[&index[w]]);
                }
            }
            units.push(Unit {
                a,
                b,
                weight: templates[members[a]].weight + templates[members[b]].weight,
                survives,
                writers: writers.into_iter().collect(),
            });
        }
        let mut due = vec![Vec::new(); members.len()];
        for (i, u) in units.iter().enumerate() {
            due[u.a.max(u.b)].push(i);
        }
        let mut search = Search {
            opts: &opts,
            units: &units,
            due,
            choice: vec![0; members.len()],
            best: None,
        };
        search.run(0, 0.0);
        let (_, _, choice) = search.best.expect("at least one candidate");
        for (p, &t) in members.iter().enumerate() {
            result
                .assignment
                .insert(templates[t].name.clone(), opts[p][choice[p]].clone());
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationClass {
    Commutative,
    Local,
    Global,
    LocalOrGlobal,
}

impl fmt::Display for OperationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OperationClass::Commutative => "commutative",
            OperationClass::Local => "local",
            OperationClass::Global => "global",
            OperationClass::LocalOrGlobal => "local-or-global",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxnClassification {
    pub name: String,
    pub class: OperationClass,
    pub params: Vec<String>,
    pub weight: f64,
    pub read_only: bool,
    /// Fixed home server seed for transactions without a partitioning
    /// parameter; routing reduces it modulo the server count.
    pub home_hash: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub transactions: Vec<TxnClassification>,
    pub conflicts: Vec<ConflictRecord>,
    pub residual: Vec<ConflictRecord>,
    pub cost: f64,
}

impl ClassificationReport {
    pub fn get(&self, name: &str) -> Option<&TxnClassification> {
        self.transactions.iter().find(|t| t.name == name)
    }

    pub fn class_of(&self, name: &str) -> Option<OperationClass> {
        self.get(name).map(|t| t.class)
    }

    pub fn count(&self, class: OperationClass) -> usize {
        self.transactions.iter().filter(|t| t.class == class).count()
    }

    pub fn partitioning(&self) -> PartitioningArray {
        PartitioningArray {
            assignment: self
                .transactions
                .iter()
                .map(|t| (t.name.clone(), t.params.clone()))
                .collect(),
        }
    }

    /// Plain-text table, one row per transaction.
    pub fn table(&self) -> String {
        let rows: Vec<[String; 4]> = self
            .transactions
            .iter()
            .map(|t| {
                [
                    t.name.clone(),
                    t.class.to_string(),
                    if t.params.is_empty() {
                        "-".to_string()
                    } else {
                        t.params.join(", ")
                    },
                    if t.read_only { "yes" } else { "no" }.to_string(),
                ]
            })
            .collect();
        let header = ["transaction", "class", "partitioned by", "read-only"];
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: [&str; 4]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                s.push_str(&format!("{:<w$}", c, w = widths[i]));
                s.push_str(if i == 3 { "\n" } else { "  " });
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(header);
        for r in &rows {
            out.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
        }
        out.push_str(&format!(
            "\n{} local, {} global, {} commutative, {} local-or-global; cost {}\n",
            self.count(OperationClass::Local),
            self.count(OperationClass::Global),
            self.count(OperationClass::Commutative),
            self.count(OperationClass::LocalOrGlobal),
            self.cost
        ));
        out
    }
}

/// Assigns a class to every template under `p`.
pub fn classify(
    templates: &[TransactionTemplate],
    p: &PartitioningArray,
    conflicts: &[ConflictRecord],
) -> ClassificationReport {
    let commutative = commutative_set(templates, conflicts);
    let relevant: Vec<ConflictRecord> = conflicts
        .iter()
        .filter(|r| !commutative.contains(&r.t) && !commutative.contains(&r.t2))
        .cloned()
        .collect();
    let residual = residual_conflicts(p, &relevant);
    let global: BTreeSet<&str> = residual.iter().flat_map(|r| r.writers()).collect();
    let transactions = templates
        .iter()
        .map(|t| {
            let params = if commutative.contains(&t.name) {
                Vec::new()
            } else {
                p.params(&t.name).to_vec()
            };
            let class = if commutative.contains(&t.name) {
                OperationClass::Commutative
            } else if global.contains(t.name.as_str()) {
                OperationClass::Global
            } else if params.len() >= 2 {
                OperationClass::LocalOrGlobal
            } else {
                OperationClass::Local
            };
            let home_hash = (class != OperationClass::Commutative && params.is_empty())
                .then(|| stable_hash_str(&t.name));
            TxnClassification {
                name: t.name.clone(),
                class,
                params,
                weight: t.weight,
                read_only: t.is_read_only(),
                home_hash,
            }
        })
        .collect();
    ClassificationReport {
        transactions,
        cost: cost(p, &relevant, templates),
        conflicts: conflicts.to_vec(),
        residual,
    }
}

/// Conflict detection, optimization and classification in one call.
pub fn partition(
    templates: &[TransactionTemplate],
    config: &OptimizerConfig,
) -> Result<ClassificationReport, PartitionError> {
    let conflicts = detect_conflicts(templates);
    let p = optimize_partitioning(templates, &conflicts, config)?;
    Ok(classify(templates, &p, &conflicts))
}

#[derive(Deserialize)]
struct WeightsFile {
    version: u32,
    #[serde(default)]
    weights: BTreeMap<String, f64>,
}

/// Overrides template weights from a TOML document:
///
/// ```toml
/// version = 1
/// [weights]
/// order = 3.0
/// ```
pub fn apply_weights(templates: &mut [TransactionTemplate], text: &str) -> Result<(), PartitionError> {
    let file: WeightsFile = toml::from_str(text).map_err(|e| PartitionError::Weights(e.to_string()))?;
    if file.version != 1 {
        return Err(PartitionError::Weights(format!("unsupported version {}", file.version)));
    }
    for (name, w) in file.weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(PartitionError::Weights(format!("weight of {name} must be nonnegative")));
        }
        let t = templates
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| PartitionError::UnknownTransaction(name.clone()))?;
        t.weight = w;
    }
    Ok(())
}
