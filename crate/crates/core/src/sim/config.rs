use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::protocol::Fault;
use crate::value::Value;

/// Round-trip times between sites.
///
/// ```toml
/// version = 1
/// intra_site_ms = 20.0
/// sites = ["G", "J"]
/// rtt_ms = [[0, 253], [253, 0]]
/// ```
///
/// A message between two sites takes half the round-trip time; a message
/// within one site takes half of `intra_site_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    pub sites: Vec<String>,
    pub rtt_ms: Vec<Vec<f64>>,
    pub intra_site_ms: f64,
}

#[derive(Deserialize)]
struct LatencyFile {
    version: u32,
    intra_site_ms: f64,
    sites: Vec<String>,
    #[serde(default)]
    rtt_ms: Vec<Vec<f64>>,
}

impl LatencyMatrix {
    pub fn single_site(intra_site_ms: f64) -> Self {
        LatencyMatrix {
            sites: vec!["local".into()],
            rtt_ms: vec![vec![0.0]],
            intra_site_ms,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let f: LatencyFile = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        if f.version != 1 {
            return Err(SimError::Config(format!("unsupported latency file version {}", f.version)));
        }
        let rtt_ms = if f.rtt_ms.is_empty() && f.sites.len() == 1 {
            vec![vec![0.0]]
        } else {
            f.rtt_ms
        };
        let m = LatencyMatrix {
            sites: f.sites,
            rtt_ms,
            intra_site_ms: f.intra_site_ms,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.sites.len();
        let bad = |m: String| Err(SimError::Config(m));
        if n == 0 {
            return bad("latency matrix has no sites".into());
        }
        if self.intra_site_ms.is_nan() || self.intra_site_ms < 0.0 {
            return bad("intra-site latency must be nonnegative".into());
        }
        if self.rtt_ms.len() != n || self.rtt_ms.iter().any(|r| r.len() != n) {
            return bad(format!("rtt_ms must be {n}x{n}"));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = self.rtt_ms[i][j];
                if v.is_nan() || v < 0.0 {
                    return bad(format!("negative latency {} -> {}", self.sites[i], self.sites[j]));
                }
                if v != self.rtt_ms[j][i] {
                    return bad(format!("asymmetric latency {} <-> {}", self.sites[i], self.sites[j]));
                }
                if v < self.intra_site_ms {
                    return bad(format!(
                        "{} <-> {} is below the intra-site latency",
                        self.sites[i], self.sites[j]
                    ));
                }
            }
        }
        Ok(())
    }

    /// One-way delay in microseconds.
    pub fn one_way_us(&self, a: usize, b: usize) -> u64 {
        let rtt = if a == b { self.intra_site_ms } else { self.rtt_ms[a][b] };
        (rtt * 500.0).round() as u64
    }

    /// Site of each of `n` servers: all on the one site, or server `i` on
    /// site `i`.
    pub fn placement(&self, n: usize) -> Result<Vec<usize>, SimError> {
        if self.sites.len() == 1 {
            return Ok(vec![0; n]);
        }
        if n > self.sites.len() {
            return Err(SimError::Config(format!(
                "{n} servers but only {} sites",
                self.sites.len()
            )));
        }
        Ok((0..n).collect())
    }
}

/// Values a parameter is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Domain {
    Range { min: i64, max: i64 },
    Values { values: Vec<Value> },
}

impl Default for Domain {
    fn default() -> Self {
        Domain::Range { min: 1, max: 1000 }
    }
}

/// Rows created before the run: keys `1..=count` in the first key column,
/// the rest from `values` or zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub table: String,
    pub count: i64,
    #[serde(default)]
    pub values: BTreeMap<String, Value>,
}

/// A workload description.
///
/// ```toml
/// version = 1
/// name = "ministore"
/// bundle = "ministore"
/// clients = 10
/// duration_ms = 20000
///
/// [mix]
/// addToCart = 0.5
/// order = 0.5
///
/// [domains]
/// i = { min = 1, max = 20 }
///
/// [[init]]
/// table = "ITEMS"
/// count = 20
/// values = { STOCK = 100000 }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub version: u32,
    pub name: String,
    /// A bundled template set; alternative to explicit files.
    #[serde(default)]
    pub bundle: Option<String>,
    #[serde(default)]
    pub schema_file: Option<String>,
    #[serde(default)]
    pub templates_file: Option<String>,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_service")]
    pub service_time_ms: f64,
    #[serde(default = "default_cores")]
    pub cores: usize,
    #[serde(default = "default_hold")]
    pub token_min_hold_ms: f64,
    #[serde(default)]
    pub think_time_ms: f64,
    /// Stop issuing operations at this simulated time.
    #[serde(default)]
    pub duration_ms: Option<f64>,
    /// Operations completed before this time are left out of the metrics.
    #[serde(default)]
    pub warmup_ms: f64,
    /// Stop issuing after this many operations.
    #[serde(default)]
    pub max_ops: Option<u64>,
    #[serde(default)]
    pub misdirect_prob: f64,
    /// Overrides the mix so that operations of local transactions make up
    /// this fraction.
    #[serde(default)]
    pub local_ratio: Option<f64>,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fault: Fault,
    pub mix: BTreeMap<String, f64>,
    #[serde(default)]
    pub domains: BTreeMap<String, Domain>,
    #[serde(default)]
    pub init: Vec<InitSpec>,
}

fn default_clients() -> usize {
    10
}
fn default_service() -> f64 {
    5.0
}
fn default_cores() -> usize {
    2
}
fn default_hold() -> f64 {
    1.0
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let spec: WorkloadSpec = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        if spec.version != 1 {
            return Err(SimError::Config(format!("unsupported workload version {}", spec.version)));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.mix.is_empty() {
            return bad("mix is empty");
        }
        if self.mix.values().any(|p| p.is_nan() || *p < 0.0) {
            return bad("mix probabilities must be nonnegative");
        }
        let sum: f64 = self.mix.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SimError::Config(format!("mix probabilities sum to {sum}, not 1")));
        }
        if self.cores == 0 {
            return bad("cores must be positive");
        }
        if self.duration_ms.is_none() && self.max_ops.is_none() {
            return bad("set duration_ms or max_ops");
        }
        if !(0.0..=1.0).contains(&self.misdirect_prob) {
            return bad("misdirect_prob must be in [0, 1]");
        }
        if let Some(r) = self.local_ratio {
            if !(0.0..=1.0).contains(&r) {
                return bad("local_ratio must be in [0, 1]");
            }
        }
        for (name, d) in &self.domains {
            match d {
                Domain::Range { min, max } if min > max => {
                    return Err(SimError::Config(format!("empty range for {name}")))
                }
                Domain::Values { values } if values.is_empty() => {
                    return Err(SimError::Config(format!("no values for {name}")))
                }
                _ => {}
            }
        }
        if self.service_time_ms < 0.0 || self.token_min_hold_ms < 0.0 || self.think_time_ms < 0.0 {
            return bad("times must be nonnegative");
        }
        Ok(())
    }
}

pub(crate) fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}
