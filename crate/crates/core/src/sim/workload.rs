use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::config::{Domain, WorkloadSpec};
use super::SimError;
use crate::minisql::TransactionTemplate;
use crate::partitioner::{ClassificationReport, OperationClass};
use crate::protocol::{server_for, Router};
use crate::trace::ServerId;
use crate::value::Value;

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone)]
struct Choice {
    txn: String,
    params: Vec<(String, Domain)>,
    /// Argument positions that must map to the client's home server.
    pinned: Vec<usize>,
}

/// Draws operations according to the mix and the parameter domains.
#[derive(Debug, Clone)]
pub struct Generator {
    choices: Vec<Choice>,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
    n: usize,
}

/// Mix after applying `local_ratio`, as `(transaction, probability)`.
pub fn effective_mix(spec: &WorkloadSpec, report: &ClassificationReport) -> Result<Vec<(String, f64)>, SimError> {
    for name in spec.mix.keys() {
        if report.get(name).is_none() {
            return Err(SimError::Config(format!("mix names unknown transaction {name}")));
        }
    }
    let Some(ratio) = spec.local_ratio else {
        return Ok(spec.mix.iter().map(|(k, v)| (k.clone(), *v)).collect());
    };
    let is_local = |name: &str| report.class_of(name) == Some(OperationClass::Local);
    let local: f64 = spec.mix.iter().filter(|(k, _)| is_local(k)).map(|(_, v)| v).sum();
    let other: f64 = spec.mix.iter().filter(|(k, _)| !is_local(k)).map(|(_, v)| v).sum();
    if (ratio > 0.0 && local <= 0.0) || (ratio < 1.0 && other <= 0.0) {
        return Err(SimError::Config(format!(
            "local_ratio {ratio} needs both local and non-local transactions in the mix"
        )));
    }
    Ok(spec
        .mix
        .iter()
        .map(|(k, v)| {
            let p = if is_local(k) {
                if local > 0.0 { ratio * v / local } else { 0.0 }
            } else if other > 0.0 {
                (1.0 - ratio) * v / other
            } else {
                0.0
            };
            (k.clone(), p)
        })
        .collect())
}

impl Generator {
    pub fn new(
        spec: &WorkloadSpec,
        report: &ClassificationReport,
        templates: &[TransactionTemplate],
        router: &Router,
    ) -> Result<Self, SimError> {
        let mix = effective_mix(spec, report)?;
        let mut choices = Vec::new();
        let mut probs = Vec::new();
        for (txn, p) in mix {
            let tpl = templates
                .iter()
                .find(|t| t.name == txn)
                .ok_or_else(|| SimError::Config(format!("mix names unknown transaction {txn}")))?;
            let params = tpl
                .params
                .iter()
                .map(|name| {
                    let d = spec
                        .domains
                        .get(&format!("{txn}.{name}"))
                        .or_else(|| spec.domains.get(name))
                        .cloned()
                        .unwrap_or_default();
                    (name.clone(), d)
                })
                .collect();
            let routing = router.routing_params(&txn);
            let pinned = match router.class_of(&txn) {
                Some(OperationClass::Local) | Some(OperationClass::Global) => routing.to_vec(),
                Some(OperationClass::LocalOrGlobal) => routing.iter().take(1).copied().collect(),
                _ => Vec::new(),
            };
            choices.push(Choice { txn, params, pinned });
            probs.push(p);
        }
        let dist = WeightedIndex::new(&probs).map_err(|e| SimError::Config(format!("mix: {e}")))?;
        Ok(Generator {
            choices,
            probs,
            dist,
            n: router.n_servers(),
        })
    }

    pub fn mix(&self) -> impl Iterator<Item = (&str, f64)> {
        self.choices.iter().map(|c| c.txn.as_str()).zip(self.probs.iter().copied())
    }

    /// An operation whose routing parameters belong to `home`.
    pub fn next<R: Rng>(&self, rng: &mut R, home: ServerId) -> Result<(String, Vec<Value>), SimError> {
        let c = &self.choices[self.dist.sample(rng)];
        let mut args = Vec::with_capacity(c.params.len());
        for (i, (name, d)) in c.params.iter().enumerate() {
            let v = if c.pinned.contains(&i) {
                (0..MAX_DRAWS)
                    .map(|_| draw(d, rng))
                    .find(|v| server_for(v, self.n) == home)
                    .ok_or_else(|| {
                        SimError::Config(format!("domain of {name} has no value owned by server {home}"))
                    })?
            } else {
                draw(d, rng)
            };
            args.push(v);
        }
        Ok((c.txn.clone(), args))
    }
}

fn draw<R: Rng>(d: &Domain, rng: &mut R) -> Value {
    match d {
        Domain::Range { min, max } => Value::Int(rng.gen_range(*min..=*max)),
        Domain::Values { values } => values[rng.gen_range(0..values.len())].clone(),
    }
}
