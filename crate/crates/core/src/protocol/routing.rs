use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::minisql::TransactionTemplate;
use crate::partitioner::{ClassificationReport, OperationClass};
use crate::trace::ServerId;
use crate::value::Value;

/// Where an operation runs and how it is treated there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    /// `None` for commutative operations, which run wherever they land.
    pub server: Option<ServerId>,
    /// Always `Commutative`, `Local` or `Global` after routing.
    pub class: OperationClass,
}

#[derive(Debug, Clone)]
struct Entry {
    class: OperationClass,
    param_idx: Vec<usize>,
    home_hash: Option<u64>,
}

/// The deterministic routing function shared by clients and servers.
#[derive(Debug, Clone)]
pub struct Router {
    n: usize,
    entries: BTreeMap<String, Entry>,
}

/// Server responsible for a partitioning value.
pub fn server_for(v: &Value, n: usize) -> ServerId {
    (v.stable_hash() % n as u64) as ServerId
}

impl Router {
    pub fn new(
        report: &ClassificationReport,
        templates: &[TransactionTemplate],
        n: usize,
    ) -> Result<Router, ProtocolError> {
        assert!(n > 0, "at least one server");
        let mut entries = BTreeMap::new();
        for t in &report.transactions {
            let tpl = templates
                .iter()
                .find(|x| x.name == t.name)
                .ok_or_else(|| ProtocolError::UnknownTransaction(t.name.clone()))?;
            let param_idx = t
                .params
                .iter()
                .map(|p| {
                    tpl.param_index(p)
                        .ok_or_else(|| ProtocolError::UnknownTransaction(format!("{}.{p}", t.name)))
                })
                .collect::<Result<_, _>>()?;
            entries.insert(
                t.name.clone(),
                Entry {
                    class: t.class,
                    param_idx,
                    home_hash: t.home_hash,
                },
            );
        }
        Ok(Router { n, entries })
    }

    pub fn n_servers(&self) -> usize {
        self.n
    }

    pub fn class_of(&self, txn: &str) -> Option<OperationClass> {
        self.entries.get(txn).map(|e| e.class)
    }

    /// Argument positions whose values decide the server.
    pub fn routing_params(&self, txn: &str) -> &[usize] {
        self.entries.get(txn).map(|e| e.param_idx.as_slice()).unwrap_or(&[])
    }

    pub fn route(&self, txn: &str, args: &[Value]) -> Result<Route, ProtocolError> {
        let e = self
            .entries
            .get(txn)
            .ok_or_else(|| ProtocolError::UnknownTransaction(txn.to_string()))?;
        if e.class == OperationClass::Commutative {
            return Ok(Route {
                server: None,
                class: OperationClass::Commutative,
            });
        }
        let servers: Vec<ServerId> = e
            .param_idx
            .iter()
            .map(|&i| {
                args.get(i)
                    .map(|v| server_for(v, self.n))
                    .ok_or_else(|| ProtocolError::Arity(txn.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let server = match (servers.first(), e.home_hash) {
            (Some(&s), _) => s,
            (None, Some(h)) => (h % self.n as u64) as ServerId,
            (None, None) => 0,
        };
        let class = match e.class {
            OperationClass::LocalOrGlobal if servers.iter().all(|&s| s == server) => OperationClass::Local,
            OperationClass::LocalOrGlobal => OperationClass::Global,
            c => c,
        };
        Ok(Route {
            server: Some(server),
            class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitioner::TxnClassification;

    fn router(n: usize) -> Router {
        let t = |name: &str, class, params: &[&str], home| TxnClassification {
            name: name.into(),
            class,
            params: params.iter().map(|s| s.to_string()).collect(),
            weight: 1.0,
            read_only: false,
            home_hash: home,
        };
        let report = ClassificationReport {
            transactions: vec![
                t("createCart", OperationClass::Local, &["sid"], None),
                t("doCart", OperationClass::Local, &["sid"], None),
                t("bid", OperationClass::LocalOrGlobal, &["u", "i"], None),
                t("log", OperationClass::Commutative, &[], None),
                t("admin", OperationClass::Global, &[], Some(41)),
            ],
            conflicts: vec![],
            residual: vec![],
            cost: 0.0,
        };
        let tpl = |src: &str| crate::minisql::parse_template(src).unwrap();
        let templates = vec![
            tpl("TXN createCart(sid) {}"),
            tpl("TXN doCart(sid, iid, q) {}"),
            tpl("TXN bid(u, i) {}"),
            tpl("TXN log(x) {}"),
            tpl("TXN admin() {}"),
        ];
        Router::new(&report, &templates, n).unwrap()
    }

    #[test]
    fn same_key_same_server() {
        for n in 1..8 {
            let r = router(n);
            for sid in 0..50 {
                let a = r.route("createCart", &[sid.into()]).unwrap();
                let b = r.route("doCart", &[sid.into(), 3.into(), 1.into()]).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn single_server_takes_everything() {
        let r = router(1);
        assert_eq!(r.route("bid", &[1.into(), 2.into()]).unwrap().server, Some(0));
        assert_eq!(r.route("bid", &[1.into(), 2.into()]).unwrap().class, OperationClass::Local);
        assert_eq!(r.route("admin", &[]).unwrap().server, Some(0));
    }

    #[test]
    fn commutative_and_unpartitioned() {
        let r = router(4);
        assert_eq!(r.route("log", &[1.into()]).unwrap().server, None);
        assert_eq!(r.route("admin", &[]).unwrap().server, Some(1));
        assert!(r.route("nope", &[]).is_err());
        assert!(r.route("createCart", &[]).is_err());
    }
}
