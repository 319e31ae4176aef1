//! The `conveyor` command: partition templates, simulate the protocol and
//! check the traces it leaves behind.
//!
//! Exit codes: 0 when everything passes, 1 when a checked property is
//! violated, 2 for usage errors and for input that is missing or does not
//! parse.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use conveyor::bundled;
use conveyor::checker::{check_trace, CheckError, CheckOptions, Verdict};
use conveyor::partitioner::{apply_weights, partition, OptimizerConfig};
use conveyor::sim::{
    find_saturation, run, sweep_local_ratio, LatencyMatrix, MetricsReport, RunOptions, Scenario, SimError,
    WorkloadSpec,
};
use conveyor::trace::Trace;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "conveyor", version, about = "Partition transaction templates, simulate the token ring, check traces")]
pub struct Cli {
    /// Schema file (TOML).
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Transaction templates file.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Per-transaction weights file (TOML).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Latency matrix file, or one of `table3`, `lan`.
    #[arg(long, global = true)]
    pub latency: Option<String>,
    /// Number of servers in the ring.
    #[arg(long, global = true, default_value_t = 3)]
    pub servers: usize,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Workload file, or the name of a bundled workload.
    #[arg(long, global = true)]
    pub workload: Option<String>,
    /// Directory for the output files.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify the templates and write report.json and report.txt.
    Partition,
    /// Run a simulation and write trace.jsonl and metrics.csv.
    Simulate {
        /// Comma-separated local ratios; writes sweep.csv instead of a trace.
        #[arg(long, value_delimiter = ',', conflicts_with = "check")]
        sweep_local_ratio: Option<Vec<f64>>,
        /// With a sweep: report the highest throughput whose mean latency
        /// stays under this many milliseconds.
        #[arg(long, requires = "sweep_local_ratio")]
        cap_ms: Option<f64>,
        #[arg(long, default_value_t = 1000, requires = "cap_ms")]
        max_clients: usize,
        /// Check the trace and write verdict.json.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        misdirect_prob: Option<f64>,
    },
    /// Check a trace file and print the verdict.
    Check {
        trace: PathBuf,
        /// Also search every serial order (small traces only).
        #[arg(long)]
        brute_force: bool,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Check(#[from] CheckError),
}

/// How a command ended when it did not fail outright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Names of the properties that failed.
    Violation(Vec<String>),
}

impl Outcome {
    pub fn code(&self) -> i32 {
        match self {
            Outcome::Ok => EXIT_OK,
            Outcome::Violation(_) => EXIT_VIOLATION,
        }
    }
}

/// Parses `args`, runs the command and returns the exit code. Summaries go
/// to `stdout`, errors to `stderr`.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(o) => {
            if let Outcome::Violation(props) = &o {
                let _ = writeln!(stderr, "violated: {}", props.join(", "));
            }
            o.code()
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
    }
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Partition => cmd_partition(cli, stdout),
        Command::Simulate {
            sweep_local_ratio,
            cap_ms,
            max_clients,
            check,
            misdirect_prob,
        } => {
            let mut scn = scenario(cli)?;
            if let Some(p) = misdirect_prob {
                scn.spec.misdirect_prob = *p;
                scn.spec.validate()?;
            }
            match sweep_local_ratio {
                Some(ratios) => cmd_sweep(cli, &scn, ratios, *cap_ms, *max_clients, stdout),
                None => cmd_simulate(cli, &scn, *check, stdout),
            }
        }
        Command::Check { trace, brute_force } => cmd_check(cli, trace, *brute_force, stdout),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn out(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

/// The workload named on the command line and the directory its relative
/// paths resolve against.
fn workload(cli: &Cli) -> Result<Option<(WorkloadSpec, Option<PathBuf>)>, CliError> {
    let Some(arg) = &cli.workload else {
        return Ok(None);
    };
    let path = Path::new(arg);
    let (text, base) = if path.is_file() {
        (read(path)?, Some(path.parent().unwrap_or(Path::new("")).to_path_buf()))
    } else if let Some((_, text)) = bundled::WORKLOADS.iter().find(|(n, _)| n == arg) {
        (text.to_string(), None)
    } else {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "no such file or bundled workload"),
        });
    };
    let spec = WorkloadSpec::from_toml(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(Some((spec, base)))
}

/// Schema and template text: explicit files first, then the workload's
/// files, then its bundle.
fn sources(cli: &Cli, wl: Option<&(WorkloadSpec, Option<PathBuf>)>) -> Result<(String, String), CliError> {
    let rel = |f: &str| match wl.and_then(|(_, b)| b.as_ref()) {
        Some(b) => b.join(f),
        None => PathBuf::from(f),
    };
    let bundle = wl.and_then(|(s, _)| s.bundle.as_deref()).map(|name| {
        bundled::by_name(name).ok_or_else(|| CliError::Usage(format!("no bundled template set `{name}`")))
    });
    let pick = |flag: &Option<PathBuf>, file: Option<&String>, from_bundle: fn(bundled::Bundle) -> &'static str| {
        if let Some(p) = flag {
            return read(p);
        }
        if let Some(f) = file {
            return read(&rel(f));
        }
        match &bundle {
            Some(Ok(b)) => Ok(from_bundle(*b).to_string()),
            Some(Err(e)) => Err(CliError::Usage(e.to_string())),
            None => Err(CliError::Usage(
                "give --schema and --templates, or a --workload that names them".into(),
            )),
        }
    };
    let spec = wl.map(|(s, _)| s);
    let schema = pick(&cli.schema, spec.and_then(|s| s.schema_file.as_ref()), |b| b.schema)?;
    let templates = pick(&cli.templates, spec.and_then(|s| s.templates_file.as_ref()), |b| b.templates)?;
    Ok((schema, templates))
}

fn latency(cli: &Cli) -> Result<LatencyMatrix, CliError> {
    let text = match cli.latency.as_deref() {
        None | Some("lan") => bundled::LATENCY_LAN.to_string(),
        Some("table3") => bundled::LATENCY_TABLE3.to_string(),
        Some(p) => read(Path::new(p))?,
    };
    LatencyMatrix::from_toml(&text).map_err(|e| CliError::Parse {
        path: PathBuf::from(cli.latency.as_deref().unwrap_or("lan")),
        msg: e.to_string(),
    })
}

fn weights(cli: &Cli) -> Result<Option<String>, CliError> {
    cli.weights.as_deref().map(read).transpose()
}

fn scenario(cli: &Cli) -> Result<Scenario, CliError> {
    let seed = cli
        .seed
        .ok_or_else(|| CliError::Usage("simulate needs --seed".into()))?;
    let wl = workload(cli)?.ok_or_else(|| CliError::Usage("simulate needs --workload".into()))?;
    let (schema, templates) = sources(cli, Some(&wl))?;
    let mut spec = wl.0;
    spec.seed = seed;
    let scn = Scenario::new(spec, &schema, &templates, weights(cli)?.as_deref(), latency(cli)?)?;
    if cli.servers == 0 {
        return Err(CliError::Usage("--servers must be at least 1".into()));
    }
    scn.latency.placement(cli.servers)?;
    Ok(scn)
}

fn cmd_partition(cli: &Cli, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let wl = workload(cli)?;
    let (schema_text, templates_text) = sources(cli, wl.as_ref())?;
    let parse_err = |p: &Option<PathBuf>, msg: String| CliError::Parse {
        path: p.clone().unwrap_or_else(|| PathBuf::from("<bundled>")),
        msg,
    };
    let (_, mut templates) =
        bundled::load(&schema_text, &templates_text).map_err(|e| parse_err(&cli.templates, e.to_string()))?;
    if let Some(w) = weights(cli)? {
        apply_weights(&mut templates, &w).map_err(|e| parse_err(&cli.weights, e.to_string()))?;
    }
    let report = partition(&templates, &OptimizerConfig::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let table = report.table();
    write(&cli.out, "report.json", &json)?;
    write(&cli.out, "report.txt", &table)?;
    out(stdout, &table)?;
    Ok(Outcome::Ok)
}

fn summary(m: &MetricsReport) -> String {
    let mut s = format!(
        "{}: {} servers, {} clients, {} ops in {:.0} ms simulated, {:.1} ops/s, mean {:.2} ms\n",
        m.scenario,
        m.servers,
        m.clients,
        m.completed_ops,
        m.sim_time_ms,
        m.throughput(),
        m.mean_ms()
    );
    for r in &m.rows {
        let _ = writeln!(
            s,
            "  {:<16} {:>7} ops  {:>9.1} ops/s  mean {:>8.2} ms  p99 {:>8.2} ms",
            r.class, r.count, r.throughput, r.mean_ms, r.p99_ms
        );
    }
    s
}

fn cmd_simulate(cli: &Cli, scn: &Scenario, check: bool, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let res = run(
        scn,
        RunOptions {
            n_servers: cli.servers,
            record_trace: true,
            drain: true,
        },
    )?;
    let trace = res.trace.expect("trace was recorded");
    write(&cli.out, "trace.jsonl", &trace.to_jsonl())?;
    write(&cli.out, "metrics.csv", &res.metrics.to_csv())?;
    write(
        &cli.out,
        "metrics.json",
        &(serde_json::to_string_pretty(&res.metrics).expect("metrics serialize") + "\n"),
    )?;
    out(stdout, &summary(&res.metrics))?;
    if !check {
        return Ok(Outcome::Ok);
    }
    let verdict = check_trace(&trace, CheckOptions::default())?;
    write(&cli.out, "verdict.json", &(verdict.to_json() + "\n"))?;
    out(stdout, &verdict_lines(&verdict))?;
    Ok(outcome(&verdict))
}

fn cmd_sweep(
    cli: &Cli,
    scn: &Scenario,
    ratios: &[f64],
    cap_ms: Option<f64>,
    max_clients: usize,
    stdout: &mut dyn Write,
) -> Result<Outcome, CliError> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Usage(format!("local ratio {r} is outside [0, 1]")));
    }
    let mut csv = String::from("local_ratio,clients,throughput,mean_ms\n");
    match cap_ms {
        Some(cap) => {
            for &r in ratios {
                let mut s = scn.clone();
                s.spec.local_ratio = Some(r);
                let sat = find_saturation(&s, cli.servers, cap, max_clients)?;
                let _ = writeln!(csv, "{r},{},{:.3},{:.3}", sat.clients, sat.throughput, sat.mean_ms);
            }
        }
        None => {
            for (r, m) in ratios.iter().zip(sweep_local_ratio(scn, cli.servers, ratios)?) {
                let _ = writeln!(csv, "{r},{},{:.3},{:.3}", m.clients, m.throughput(), m.mean_ms());
            }
        }
    }
    write(&cli.out, "sweep.csv", &csv)?;
    out(stdout, &csv)?;
    Ok(Outcome::Ok)
}

fn verdict_lines(v: &Verdict) -> String {
    let mut s = String::new();
    for c in &v.checks {
        let status = if c.skipped {
            "SKIP"
        } else if c.pass {
            "PASS"
        } else {
            "FAIL"
        };
        let _ = write!(s, "{status} {}", c.name);
        if let Some(d) = &c.detail {
            let _ = write!(s, ": {d}");
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "{} operations, {}",
        v.operations,
        if v.pass { "all checks pass" } else { "violations found" }
    );
    s
}

fn outcome(v: &Verdict) -> Outcome {
    if v.pass {
        Outcome::Ok
    } else {
        Outcome::Violation(v.failed().into_iter().map(String::from).collect())
    }
}

fn cmd_check(cli: &Cli, path: &Path, brute_force: bool, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let file = fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let trace = Trace::read_jsonl(io::BufReader::new(file)).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let verdict = check_trace(&trace, CheckOptions { brute_force }).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    write(&cli.out, "verdict.json", &(verdict.to_json() + "\n"))?;
    out(stdout, &verdict_lines(&verdict))?;
    Ok(outcome(&verdict))
}
