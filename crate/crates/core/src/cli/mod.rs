//! Command-line entry point: `train`, `eval`, `profile`, `sweep` and `dot`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file-format error,
//! 4 numeric precondition violated.

pub mod config;
pub mod container;
pub mod idx;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::accumulate::{
    self, classify, dot_exact, sorted_dot, sorted_dot_tiled, AccumConfig, AccumError, OverflowClass, Policy,
    DEFAULT_MAX_SORT_ROUNDS,
};
use crate::nn::{self, Dataset, EpochLog, Model, NnError};
use crate::profile::{self, ModelCache, ProfileError, ReportFormat, SweepRecord};
use crate::quant;
use config::{ConfigError, RunConfig};
use container::ContainerError;
use idx::{IdxError, Split};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<IdxError> for CliError {
    fn from(e: IdxError) -> Self {
        CliError::Io(format!("dataset: {e}"))
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Model(e) => e.into(),
            e => CliError::Io(format!("model file: {e}")),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Nn(e) => e.into(),
            ProfileError::Accum(e) => CliError::Config(e.to_string()),
            ProfileError::Empty => CliError::Numeric(e.to_string()),
            e => CliError::Io(e.to_string()),
        }
    }
}

impl From<AccumError> for CliError {
    fn from(e: AccumError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "pqs", version, about = "Low-bitwidth accumulation simulator for quantized, N:M-pruned networks")]
pub struct Cli {
    /// JSON run configuration (required by train, eval, profile and sweep).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write `model.pqsm` plus `train_log.json`.
    Train,
    /// Evaluate a model on the test split.
    Eval(EvalArgs),
    /// Evaluate a model across the configured accumulator grid.
    Profile,
    /// Train (or load cached) models for every sweep cell and extract the pareto frontier.
    Sweep,
    /// Trace one integer dot product through the accumulator.
    Dot(DotArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Accumulator width; defaults to the model's own configuration.
    #[arg(long)]
    pub p: Option<u32>,
    /// Accumulation policy, e.g. `saturate` or `sorted-tiled-256`.
    #[arg(long)]
    pub policy: Option<Policy>,
}

#[derive(Debug, Args)]
pub struct DotArgs {
    /// Weight codes, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub w: Option<String>,
    /// Activation codes (already offset-corrected), comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<String>,
    /// File with the weight codes on the first line and activation codes on the second.
    #[arg(long, conflicts_with_all = ["w", "x"])]
    pub file: Option<PathBuf>,
    /// Operand bitwidth; every code must fit a signed b-bit integer.
    #[arg(long)]
    pub b: u32,
    /// Accumulator width.
    #[arg(long)]
    pub p: u32,
    #[arg(long, default_value = "sorted")]
    pub policy: Policy,
    /// Maximum pairing rounds of the sorted algorithm.
    #[arg(long, default_value_t = DEFAULT_MAX_SORT_ROUNDS)]
    pub rounds: usize,
}

/// Runs a parsed command line, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Dot(args) => cmd_dot(args, out),
        command => {
            let cfg = load_config(&cli)?;
            match command {
                Command::Train => cmd_train(&cfg, out),
                Command::Eval(args) => cmd_eval(&cfg, args, out),
                Command::Profile => cmd_profile(&cfg, out),
                Command::Sweep => cmd_sweep(&cfg, out),
                Command::Dot(_) => unreachable!(),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let data = idx::load_mnist(&cfg.data_dir, split)?;
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.eval_limit,
    };
    Ok(limit.map_or(data.clone(), |n| data.take(n)))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    profile::write_atomic(path, bytes).map_err(io(path))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

#[derive(Serialize)]
struct FinalEval {
    accuracy: f64,
    p: u32,
    policy: Policy,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    run_id: String,
    epochs: &'a [EpochLog],
    final_eval: FinalEval,
}

fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let job = cfg.job();
    let run_id = job.run_id();
    let mut model = job.build()?;
    let log = nn::train(&mut model, &train, &job.train)?;
    for e in &log.epochs {
        writeln!(
            out,
            "epoch {:>3}  {:?}  loss {:.4}  train acc {:.4}  sparsity {:.3}",
            e.epoch, e.phase, e.loss, e.accuracy, e.sparsity
        )
        .ok();
    }
    let accum = model.layers[0].spec.accum;
    let (accuracy, _) = nn::evaluate(&model, &test, None)?;
    writeln!(out, "test accuracy {accuracy:.4} (p={}, {})", accum.bits(), accum.policy()).ok();
    let provenance = json!({ "run_id": run_id, "job": job });
    let model_path = cfg.output_dir.join("model.pqsm");
    std::fs::create_dir_all(&cfg.output_dir).map_err(io(&cfg.output_dir))?;
    container::save(&model_path, &model, &provenance)?;
    let report = TrainReport {
        run_id,
        epochs: &log.epochs,
        final_eval: FinalEval { accuracy, p: accum.bits(), policy: accum.policy() },
    };
    write_out(&cfg.output_dir.join("train_log.json"), &to_json(&report))?;
    writeln!(out, "wrote {}", model_path.display()).ok();
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(Model, String), CliError> {
    let (model, provenance) = container::load(&cfg.model_path())?;
    let run_id = provenance.get("run_id").and_then(|v| v.as_str()).unwrap_or("model").to_string();
    Ok((model, run_id))
}

fn record(run_id: &str, m: &Model, cell: profile::ProfileCell) -> SweepRecord {
    let (b_w, b_x) = m.weight_layers().next().map_or((0, 0), |(_, l)| (l.spec.weight_bits, l.spec.act_bits));
    SweepRecord {
        run_id: run_id.to_string(),
        sparsity: m.sparsity(),
        b_w,
        b_x,
        p: cell.p,
        policy: cell.policy,
        accuracy: cell.accuracy,
        report: cell.report,
    }
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, run_id) = load_model(cfg)?;
    let test = load_split(cfg, Split::Test)?;
    let own = model.layers[0].spec.accum;
    let accum = AccumConfig::with_rounds(
        args.p.unwrap_or(own.bits()),
        args.policy.unwrap_or(own.policy()),
        cfg.accum.max_sort_rounds,
    )?;
    let cell = profile::profile_model(&model, &test, &[accum])?.remove(0);
    let rec = record(&run_id, &model, cell);
    writeln!(
        out,
        "accuracy {:.6}  p={} {}  transient {}  persistent {}  events {}",
        rec.accuracy, rec.p, rec.policy, rec.report.total.transient, rec.report.total.persistent, rec.report.total.events
    )
    .ok();
    let path = cfg.output_dir.join(profile::report_file_name(&run_id, rec.policy, rec.p));
    write_out(&path, profile::render_report(&[rec], ReportFormat::Csv).as_bytes())?;
    Ok(())
}

fn cmd_profile(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, run_id) = load_model(cfg)?;
    let test = load_split(cfg, Split::Test)?;
    let cells = profile::profile_model(&model, &test, &cfg.accum_configs())?;
    let records: Vec<SweepRecord> = cells.into_iter().map(|c| record(&run_id, &model, c)).collect();
    writeln!(out, "{:>3} {:<20} {:>9} {:>10} {:>10} {:>10}", "p", "policy", "accuracy", "transient", "persistent", "events").ok();
    for r in &records {
        let t = &r.report.total;
        writeln!(out, "{:>3} {:<20} {:>9.4} {:>10} {:>10} {:>10}", r.p, r.policy.to_string(), r.accuracy, t.transient, t.persistent, t.events).ok();
        let path = cfg.output_dir.join(profile::report_file_name(&run_id, r.policy, r.p));
        write_out(&path, profile::render_report(std::slice::from_ref(r), ReportFormat::Csv).as_bytes())?;
    }
    let jsonl = cfg.output_dir.join(format!("{run_id}_profile.jsonl"));
    write_out(&jsonl, profile::render_report(&records, ReportFormat::Jsonl).as_bytes())?;
    Ok(())
}

/// Trained sweep models stored as `<dir>/<run_id>.pqsm`.
struct DirCache(PathBuf);

impl ModelCache for DirCache {
    fn load(&self, run_id: &str) -> Result<Option<Model>, ProfileError> {
        let path = self.0.join(format!("{run_id}.pqsm"));
        if !path.exists() {
            return Ok(None);
        }
        container::load(&path).map(|(m, _)| Some(m)).map_err(|e| ProfileError::Cache(format!("{}: {e}", path.display())))
    }

    fn store(&self, run_id: &str, m: &Model) -> Result<(), ProfileError> {
        let err = |e: String| ProfileError::Cache(e);
        std::fs::create_dir_all(&self.0).map_err(|e| err(e.to_string()))?;
        let path = self.0.join(format!("{run_id}.pqsm"));
        container::save(&path, m, &json!({ "run_id": run_id })).map_err(|e| err(e.to_string()))
    }
}

fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let cache = DirCache(cfg.output_dir.join("models"));
    let records = profile::sweep(&cfg.sweep_jobs(), &train, &test, &cfg.accum_configs(), &cache)?;
    let frontier = profile::pareto_frontier(&records)?;
    for (name, recs, format) in [
        ("sweep.csv", &records, ReportFormat::Csv),
        ("sweep.jsonl", &records, ReportFormat::Jsonl),
        ("frontier.csv", &frontier, ReportFormat::Csv),
    ] {
        write_out(&cfg.output_dir.join(name), profile::render_report(recs, format).as_bytes())?;
    }
    writeln!(out, "{} records, {} on the frontier", records.len(), frontier.len()).ok();
    for r in &frontier {
        writeln!(out, "  p={:<3} {:<20} acc {:.4}  sparsity {:.3}  run {}", r.p, r.policy.to_string(), r.accuracy, r.sparsity, r.run_id).ok();
    }
    Ok(())
}

fn parse_codes(s: &str) -> Result<Vec<i32>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<i32>().map_err(|e| CliError::Config(format!("bad integer `{t}`: {e}"))))
        .collect()
}

fn class_name(c: OverflowClass) -> &'static str {
    match c {
        OverflowClass::None => "none",
        OverflowClass::Transient => "transient",
        OverflowClass::Persistent => "persistent",
    }
}

fn cmd_dot(args: &DotArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (w, x) = match &args.file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io(path))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let w = parse_codes(lines.next().unwrap_or(""))?;
            let x = parse_codes(lines.next().unwrap_or(""))?;
            (w, x)
        }
        None => (parse_codes(args.w.as_deref().unwrap_or(""))?, parse_codes(args.x.as_deref().unwrap_or(""))?),
    };
    if !(quant::MIN_BITS..=quant::MAX_BITS).contains(&args.b) {
        return Err(CliError::Config(format!("--b {} outside [2, 16]", args.b)));
    }
    let (lo, hi) = (-(1i32 << (args.b - 1)), (1i32 << (args.b - 1)) - 1);
    if let Some(v) = w.iter().chain(&x).find(|v| !(lo..=hi).contains(*v)) {
        return Err(CliError::Numeric(format!("code {v} does not fit {} signed bits [{lo}, {hi}]", args.b)));
    }
    let cfg = AccumConfig::with_rounds(args.p, args.policy, args.rounds)?;
    let trace = dot_exact(&w, &x).map_err(|e| CliError::Config(e.to_string()))?;
    let (rlo, rhi) = accumulate::Register::new(args.p, accumulate::Arith::Exact).range();
    let class = classify(&trace, args.p, None)?;
    let list = |v: &[i128]| v.iter().map(i128::to_string).collect::<Vec<_>>().join(", ");
    let wide: Vec<i128> = trace.products.iter().map(|&p| i128::from(p)).collect();
    let mut o = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(o, "products   [{}]", list(&wide));
    let _ = writeln!(o, "exact sum  {}", trace.exact_sum);
    let _ = writeln!(o, "register   p={} range [{rlo}, {rhi}], policy {}", args.p, args.policy);
    let _ = writeln!(o, "class      {} (natural order)", class_name(class));
    let (value, events) = match args.policy {
        Policy::Sorted | Policy::SortedSaturate => {
            let s = sorted_dot(&trace.products, &cfg);
            let last = s.states.len().saturating_sub(1);
            for (i, state) in s.states.iter().enumerate() {
                let label = if i == last { "final".to_string() } else { format!("round {}", i + 1) };
                let _ = writeln!(o, "{label:<10} [{}]", list(state));
            }
            (s.value, s.events)
        }
        Policy::SortedTiled { tile } => {
            let s = sorted_dot_tiled(&trace.products, &cfg, tile)?;
            let _ = writeln!(o, "tiles      [{}]", list(&s.tile_results));
            let _ = writeln!(o, "rounds     {}", s.rounds);
            (s.value, s.events)
        }
        Policy::ResolveTransients => {
            let d = accumulate::evaluate_products(&trace.products, &cfg);
            let a = accumulate::accumulate(&trace.products, &cfg, None)?;
            let _ = writeln!(o, "running    [{}]", list(&a.running));
            if class == OverflowClass::Transient {
                let _ = writeln!(o, "resolved   transient recomputed exactly");
            }
            (d.value, if class == OverflowClass::Transient { Vec::new() } else { a.events })
        }
        Policy::Exact | Policy::Saturate | Policy::Wrap => {
            let a = accumulate::accumulate(&trace.products, &cfg, None)?;
            let _ = writeln!(o, "running    [{}]", list(&a.running));
            (a.value, a.events)
        }
    };
    let _ = writeln!(o, "events     {}", events.len());
    for e in &events {
        let _ = writeln!(o, "  step {:>4}  value {:>8}  {:?}", e.position, e.value, e.kind);
    }
    let _ = writeln!(o, "result     {value}");
    out.write_all(o.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(args: &[&str]) -> Result<String, CliError> {
        let mut argv = vec!["pqs", "dot"];
        argv.extend_from_slice(args);
        let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Config(e.to_string()))?;
        let mut buf = Vec::new();
        run(cli, &mut buf)?;
        Ok(String::from_utf8(buf).unwrap())
    }

    #[test]
    fn dot_persistent_example() {
        let s = dot(&["--w", "5,4", "--x", "1,1", "--b", "4", "--p", "4", "--policy", "sorted"]).unwrap();
        assert!(s.trim_end().ends_with("result     9"), "{s}");
        assert!(s.contains("class      persistent"));
    }

    #[test]
    fn dot_empty_is_zero() {
        let s = dot(&["--w", "", "--x", "", "--b", "4", "--p", "8"]).unwrap();
        assert!(s.trim_end().ends_with("result     0"));
    }

    #[test]
    fn dot_shows_rounds() {
        let s = dot(&["--w", "7,7,-8,-8,3", "--x", "7,-1,7,-1,2", "--b", "4", "--p", "8"]).unwrap();
        assert!(s.contains("round 1"), "{s}");
        assert!(s.contains("final"));
    }

    #[test]
    fn dot_errors_map_to_exit_codes() {
        let e = dot(&["--w", "9", "--x", "1", "--b", "4", "--p", "8"]).unwrap_err();
        assert_eq!(e.exit_code(), 4);
        let e = dot(&["--w", "1,2", "--x", "1", "--b", "4", "--p", "8"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = dot(&["--w", "1,x", "--x", "1,1", "--b", "4", "--p", "8"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let cli = Cli::try_parse_from(["pqs", "train"]).unwrap();
        assert_eq!(run(cli, &mut Vec::new()).unwrap_err().exit_code(), 2);
        let cli = Cli::try_parse_from(["pqs", "--config", "/nonexistent.json", "train"]).unwrap();
        assert_eq!(run(cli, &mut Vec::new()).unwrap_err().exit_code(), 3);
    }
}
