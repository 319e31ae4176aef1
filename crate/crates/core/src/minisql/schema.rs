use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::SqlError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<String>,
    pub key: Vec<String>,
}

impl TableDef {
    pub fn new(name: &str, columns: &[&str], key: &[&str]) -> Self {
        TableDef {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            key: key.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn column_index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn has_column(&self, column: &str) -> bool {
        self.column_index(column).is_some()
    }

    /// Column positions of the primary key, in key order.
    pub fn key_indices(&self) -> Vec<usize> {
        self.key
            .iter()
            .map(|k| self.column_index(k).expect("validated key column"))
            .collect()
    }

    pub fn is_key_column(&self, column: &str) -> bool {
        self.key.iter().any(|k| k == column)
    }
}

/// The set of tables a template file is written against.
///
/// On disk this is a TOML document whose first entry is `version = 1`:
///
/// ```toml
/// version = 1
///
/// [[table]]
/// name = "ITEMS"
/// columns = ["ID", "NAME", "STOCK"]
/// key = ["ID"]
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "table", default)]
    pub tables: Vec<TableDef>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    version: u32,
    #[serde(rename = "table", default)]
    tables: Vec<TableDef>,
}

impl Schema {
    pub fn new(tables: Vec<TableDef>) -> Result<Self, SqlError> {
        let schema = Schema { tables };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_toml(text: &str) -> Result<Self, SqlError> {
        let file: SchemaFile =
            toml::from_str(text).map_err(|e| SqlError::Schema(e.to_string()))?;
        if file.version != SCHEMA_VERSION {
            return Err(SqlError::Schema(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                file.version
            )));
        }
        Schema::new(file.tables)
    }

    pub fn to_toml(&self) -> String {
        let file = SchemaFile {
            version: SCHEMA_VERSION,
            tables: self.tables.clone(),
        };
        toml::to_string(&file).expect("schema serializes")
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TableDef, SqlError> {
        self.table(name)
            .ok_or_else(|| SqlError::UnknownTable(name.to_string()))
    }

    fn validate(&self) -> Result<(), SqlError> {
        let mut names = BTreeSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(SqlError::Schema(format!("duplicate table {}", t.name)));
            }
            if t.columns.is_empty() {
                return Err(SqlError::Schema(format!("table {} has no columns", t.name)));
            }
            let cols: BTreeSet<_> = t.columns.iter().collect();
            if cols.len() != t.columns.len() {
                return Err(SqlError::Schema(format!("table {} repeats a column", t.name)));
            }
            if t.key.is_empty() {
                return Err(SqlError::Schema(format!("table {} has no key", t.name)));
            }
            for k in &t.key {
                if !cols.contains(k) {
                    return Err(SqlError::Schema(format!(
                        "key column {k} is not a column of {}",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }
}
