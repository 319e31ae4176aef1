use serde::{Deserialize, Serialize};

use crate::partitioner::OperationClass;

/// Latency of one completed operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub class: OperationClass,
    pub issued_us: u64,
    pub done_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// `local`, `global`, `commutative` or `all`.
    pub class: String,
    pub count: usize,
    /// Operations per second.
    pub throughput: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerSummary {
    pub tokens: u64,
    pub mean_hold_ms: f64,
    pub max_queue: usize,
    pub local_aborts: u64,
    pub global_aborts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub servers: usize,
    pub clients: usize,
    pub rows: Vec<ClassStats>,
    pub req_sent: u64,
    pub replies: u64,
    pub maps: u64,
    /// Requests without a response when the run stopped.
    pub in_flight: u64,
    pub completed_ops: u64,
    /// Mean latency counting requests still open at the end of the window
    /// at their age then.
    pub open_mean_ms: f64,
    pub sim_time_ms: f64,
    pub per_server: Vec<ServerSummary>,
}

pub const CSV_HEADER: &str = "scenario,servers,clients,class,throughput,mean_ms,p50_ms,p99_ms";

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn class_stats(label: &str, samples: &[&Sample], window_us: u64) -> ClassStats {
    let mut ms: Vec<f64> = samples
        .iter()
        .map(|s| (s.done_us - s.issued_us) as f64 / 1000.0)
        .collect();
    ms.sort_by(f64::total_cmp);
    let mean = if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 };
    let throughput = if window_us == 0 {
        0.0
    } else {
        ms.len() as f64 / (window_us as f64 / 1e6)
    };
    ClassStats {
        class: label.to_string(),
        count: ms.len(),
        throughput,
        mean_ms: mean,
        p50_ms: percentile(&ms, 0.5),
        p99_ms: percentile(&ms, 0.99),
    }
}

/// Per-class and overall statistics of samples issued at or after `from_us`
/// and completed by `to_us`.
/// Mean over samples finished in the window and requests issued in it
/// but still open at its end, aged to `to_us`.
pub fn open_mean_ms(samples: &[Sample], open_since: &[u64], from_us: u64, to_us: u64) -> f64 {
    let done = samples
        .iter()
        .filter(|s| s.issued_us >= from_us && s.done_us <= to_us)
        .map(|s| s.done_us - s.issued_us);
    let open = open_since.iter().filter(|&&t| t >= from_us && t <= to_us).map(|&t| to_us - t);
    let (n, sum) = done.chain(open).fold((0u64, 0u64), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64 / 1000.0
    }
}

pub fn summarize(samples: &[Sample], from_us: u64, to_us: u64) -> Vec<ClassStats> {
    let window = to_us.saturating_sub(from_us);
    let inside: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.issued_us >= from_us && s.done_us <= to_us)
        .collect();
    let mut rows = Vec::new();
    for (label, class) in [
        ("local", OperationClass::Local),
        ("global", OperationClass::Global),
        ("commutative", OperationClass::Commutative),
    ] {
        let of: Vec<&Sample> = inside.iter().copied().filter(|s| s.class == class).collect();
        rows.push(class_stats(label, &of, window));
    }
    rows.push(class_stats("all", &inside, window));
    rows
}

impl MetricsReport {
    pub fn row(&self, class: &str) -> Option<&ClassStats> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn throughput(&self) -> f64 {
        self.row("all").map_or(0.0, |r| r.throughput)
    }

    pub fn mean_ms(&self) -> f64 {
        self.row("all").map_or(0.0, |r| r.mean_ms)
    }

    /// Rows without the header line.
    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
                    self.scenario, self.servers, self.clients, r.class, r.throughput, r.mean_ms, r.p50_ms, r.p99_ms
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }
}
