//! Schemas, templates and latency matrices shipped with the crate.

use crate::minisql::{parse_templates, Schema, SqlError, TransactionTemplate};

#[derive(Debug, Clone, Copy)]
pub struct Bundle {
    pub name: &'static str,
    pub schema: &'static str,
    pub templates: &'static str,
}

impl Bundle {
    /// Parses the bundle and derives access sets.
    pub fn load(&self) -> Result<(Schema, Vec<TransactionTemplate>), SqlError> {
        load(self.schema, self.templates)
    }
}

pub fn load(schema: &str, templates: &str) -> Result<(Schema, Vec<TransactionTemplate>), SqlError> {
    let schema = Schema::from_toml(schema)?;
    let templates = parse_templates(templates)?
        .iter()
        .map(|t| t.derive_access_sets(&schema))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((schema, templates))
}

pub const MINISTORE: Bundle = Bundle {
    name: "ministore",
    schema: include_str!("../workloads/ministore/schema.toml"),
    templates: include_str!("../workloads/ministore/templates.sql"),
};

pub const TPCW: Bundle = Bundle {
    name: "tpcw",
    schema: include_str!("../workloads/tpcw/schema.toml"),
    templates: include_str!("../workloads/tpcw/templates.sql"),
};

/// One local and one global operation of equal cost.
pub const SYNTHETIC: Bundle = Bundle {
    name: "synthetic",
    schema: include_str!("../workloads/synthetic/schema.toml"),
    templates: include_str!("../workloads/synthetic/templates.sql"),
};

pub const ALL: &[Bundle] = &[MINISTORE, TPCW, SYNTHETIC];

pub fn by_name(name: &str) -> Option<Bundle> {
    ALL.iter().copied().find(|b| b.name == name)
}

/// Round-trip times between five sites.
pub const LATENCY_TABLE3: &str = include_str!("../workloads/latency/table3.toml");
/// A single site.
pub const LATENCY_LAN: &str = include_str!("../workloads/latency/lan.toml");

pub const MINISTORE_WORKLOAD: &str = include_str!("../workloads/ministore/workload.toml");
pub const TPCW_WORKLOAD: &str = include_str!("../workloads/tpcw/workload.toml");
pub const SYNTHETIC_WORKLOAD: &str = include_str!("../workloads/synthetic/workload.toml");

/// Workload files of the bundled scenarios, by bundle name.
pub const WORKLOADS: &[(&str, &str)] = &[
    ("ministore", MINISTORE_WORKLOAD),
    ("tpcw", TPCW_WORKLOAD),
    ("synthetic", SYNTHETIC_WORKLOAD),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitioner::{partition, OperationClass, OptimizerConfig};

    #[test]
    fn tpcw_split() {
        let (_, templates) = TPCW.load().unwrap();
        let r = partition(&templates, &OptimizerConfig::default()).unwrap();
        println!("{}", r.table());
        assert_eq!(templates.len(), 20);
        assert_eq!(templates.iter().filter(|t| t.is_read_only()).count(), 13);
        assert_eq!(r.count(OperationClass::Local), 10);
        assert_eq!(r.count(OperationClass::Global), 5);
        assert_eq!(r.count(OperationClass::Commutative), 5);
    }
}
