//! `hetsim` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input (config, trace,
//! samples), 3 runtime failure (deadlock, invariant violation, `--strict`
//! with rejected requests, failed directional check).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hetsim::balancer::{candidate_table, choose_split, CpiStats};
use hetsim::costmodel::{fit_chunked, fit_prefill, ChunkedSample, PrefillSample};
use hetsim::report::{compare_csv, directional_checks};
use hetsim::sweep::{compare_policies, Execution};
use hetsim::trace::{load_trace, save_trace, synth_trace, ArrivalMode, SynthParams};
use hetsim::{presets, ClusterConfig, Error, Policy, RunOptions, Trace};

const DEFAULT_CONFIG: &str = "a100_a10_llama8b";

#[derive(Parser)]
#[command(name = "hetsim", version, about = "Heterogeneous two-GPU LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one policy and print its report.
    Run(RunArgs),
    /// Run several policies on one trace and emit a CSV row per policy.
    Compare(CompareArgs),
    /// Fit cost-model coefficients from profiled samples.
    Calibrate(CalibrateArgs),
    /// Show the balancer's candidate table for one prompt.
    Split(SplitArgs),
    /// Generate a synthetic trace file.
    Synth(SynthArgs),
    /// Run all five policies and evaluate the directional checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or a name looked up in $HETSIM_CONFIG_DIR and then among
    /// the built-in presets.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: String,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TraceArgs {
    /// Trace file: `id,arrival_ms,input_len,output_len` per line.
    #[arg(long, conflicts_with = "synth")]
    trace: Option<PathBuf>,
    /// Synthetic trace, e.g. `--synth n=1000 mean-in=1014 mean-out=247`.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    synth: Option<Vec<String>>,
    /// Arrival pattern for synthetic traces: all-at-zero or interval:<ms>.
    #[arg(long, default_value = "all-at-zero")]
    arrival: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    policy: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    trace: TraceArgs,
    /// Write the event log as NDJSON.
    #[arg(long, value_name = "PATH")]
    emit_events: Option<PathBuf>,
    /// Write the per-iteration log as NDJSON.
    #[arg(long, value_name = "PATH")]
    emit_iterations: Option<PathBuf>,
    /// Write the full report as JSON.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
    /// Write a one-row comparison CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Exit with status 3 if any request was rejected.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated, in output order.
    #[arg(long, default_value = "cronus,dp,pp,disagg-hl,disagg-lh", value_delimiter = ',')]
    policies: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    trace: TraceArgs,
    /// Output file; stdout if absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitKind {
    Prefill,
    Chunked,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with header `prefill_len,time` or `prefill_ctx,decode_ctx_sum,time`.
    samples: PathBuf,
    #[arg(long, value_enum)]
    kind: FitKind,
    /// Key prefix for the printed profile fragment.
    #[arg(long, default_value = "high_gpu")]
    prefix: String,
    /// Print the fit report as JSON instead.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input_len: u32,
    #[arg(long, default_value_t = 0)]
    n_decode: u64,
    #[arg(long, default_value_t = 0)]
    decode_ctx_sum: u64,
    /// Defaults to the chunked GPU's full capacity.
    #[arg(long)]
    free_blocks: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1014.0)]
    mean_in: f64,
    #[arg(long, default_value_t = 247.0)]
    mean_out: f64,
    #[arg(long, default_value = "all-at-zero")]
    arrival: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    trace: TraceArgs,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::Deadlock { .. }) | Some(Error::ZeroStandalone) => 3,
            _ => 2,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn runtime(err: anyhow::Error) -> Failure {
    Failure { code: 3, err }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Calibrate(a) => cmd_calibrate(a),
        Cmd::Split(a) => cmd_split(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Check(a) => cmd_check(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", message(&f.err));
            ExitCode::from(f.code)
        }
    }
}

/// Error chain joined with `: `, skipping causes already quoted by the
/// message above them.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

// ---------------------------------------------------------------- inputs

fn resolve_config(name: &str) -> anyhow::Result<ClusterConfig> {
    let direct = Path::new(name);
    if direct.exists() {
        return Ok(ClusterConfig::load(direct)?);
    }
    if let Ok(dir) = std::env::var("HETSIM_CONFIG_DIR") {
        for candidate in [Path::new(&dir).join(name), Path::new(&dir).join(format!("{name}.toml"))] {
            if candidate.exists() {
                return Ok(ClusterConfig::load(&candidate)?);
            }
        }
    }
    if let Some(cfg) = presets::by_name(name) {
        return Ok(cfg);
    }
    // Report the missing path through the usual IO error.
    Ok(ClusterConfig::load(direct)?)
}

fn load_config(args: &ConfigArgs, policy: Option<&str>) -> Result<ClusterConfig, Failure> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(p) = policy {
        cfg.policy = p.parse()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    hetsim::model::validate_config(&cfg).map_err(Error::InvalidConfig)?;
    Ok(cfg)
}

fn synth_params(pairs: &[String], arrival: ArrivalMode, seed: u64) -> anyhow::Result<SynthParams> {
    let mut p = SynthParams::conversation(arrival, seed);
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("--synth expects KEY=VALUE, got {pair:?}"))?;
        let bad = || anyhow!("--synth {k}: bad value {v:?}");
        match k {
            "n" => p.n = v.parse().map_err(|_| bad())?,
            "mean-in" => p.mean_in = v.parse().map_err(|_| bad())?,
            "mean-out" => p.mean_out = v.parse().map_err(|_| bad())?,
            "sigma-in" => p.sigma_in = v.parse().map_err(|_| bad())?,
            "sigma-out" => p.sigma_out = v.parse().map_err(|_| bad())?,
            "seed" => p.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(anyhow!("--synth: unknown key {k:?} (n, mean-in, mean-out, sigma-in, sigma-out, seed)")),
        }
    }
    Ok(p)
}

fn load_trace_args(args: &TraceArgs, seed: u64) -> Result<Trace, Failure> {
    let arrival: ArrivalMode = args.arrival.parse()?;
    let trace = match (&args.trace, &args.synth) {
        (Some(path), _) => load_trace(path)?,
        (None, Some(pairs)) => synth_trace(&synth_params(pairs, arrival, seed)?)?,
        (None, None) => synth_trace(&SynthParams::conversation(arrival, seed))?,
    };
    Ok(trace)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ndjson<T: serde::Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        let _ = writeln!(out, "{}", serde_json::to_string(item).expect("record serializes"));
    }
    out
}

// -------------------------------------------------------------- commands

fn cmd_run(a: RunArgs) -> CmdResult {
    let cfg = load_config(&a.config, a.policy.as_deref())?;
    let trace = load_trace_args(&a.trace, cfg.seed)?;
    let opts = RunOptions {
        record_events: a.emit_events.is_some(),
        record_iterations: a.emit_iterations.is_some(),
        ..RunOptions::default()
    };
    let out = hetsim::run(&cfg, &trace, &opts)?;
    if let Some(path) = &a.emit_events {
        write_file(path, &ndjson(&out.events))?;
    }
    if let Some(path) = &a.emit_iterations {
        write_file(path, &ndjson(&out.iterations))?;
    }
    if let Some(path) = &a.json {
        write_file(path, &out.report.to_json())?;
    }
    if let Some(path) = &a.csv {
        write_file(path, &compare_csv(&[cfg.policy], &trace, &[Ok(out.report.clone())]))?;
    }
    print!("{}", out.report.summary());
    if !out.violations.is_empty() {
        for v in out.violations.iter().take(20) {
            eprintln!("violation: {v}");
        }
        return Err(runtime(anyhow!("{} invariant violations", out.violations.len())));
    }
    if !out.report.failed.is_empty() {
        eprintln!("warning: {} requests rejected: {:?}", out.report.failed.len(), out.report.failed);
        if a.strict {
            return Err(runtime(anyhow!("rejected requests with --strict")));
        }
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let cfg = load_config(&a.config, None)?;
    let policies = a
        .policies
        .iter()
        .map(|p| p.parse::<Policy>())
        .collect::<Result<Vec<_>, _>>()?;
    let trace = load_trace_args(&a.trace, cfg.seed)?;
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let results = compare_policies(&cfg, &policies, &trace, exec);
    let csv = compare_csv(&policies, &trace, &results);
    match &a.out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    for (p, r) in policies.iter().zip(&results) {
        if let Err(e) = r {
            eprintln!("warning: {p} failed: {e}");
        }
    }
    Ok(())
}

fn read_samples<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("{}", path.display()))?;
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("{}", path.display()))
}

fn cmd_calibrate(a: CalibrateArgs) -> CmdResult {
    let fit = match a.kind {
        FitKind::Prefill => fit_prefill(&read_samples::<PrefillSample>(&a.samples)?)?,
        FitKind::Chunked => fit_chunked(&read_samples::<ChunkedSample>(&a.samples)?)?,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&fit).expect("fit serializes"));
        return Ok(());
    }
    println!("# r2 = {:.6}, mape = {:.6}, samples = {}", fit.r2, fit.mape, fit.samples);
    for (k, v) in fit.coefficients.profile_keys() {
        println!("{}.{k} = {v:?}", a.prefix);
    }
    Ok(())
}

fn cmd_split(a: SplitArgs) -> CmdResult {
    let cfg = load_config(&a.config, None)?;
    if a.input_len == 0 {
        return Err(anyhow!("--input-len must be at least 1").into());
    }
    let stats = CpiStats {
        n_decode: a.n_decode,
        decode_ctx_sum: a.decode_ctx_sum,
        free_kv_blocks: a.free_blocks.unwrap_or(cfg.high_gpu.kv_blocks_capacity),
        max_batched_tokens: cfg.max_batched_tokens_high as u64,
    };
    let high = cfg.high_gpu.at_budget(cfg.max_batched_tokens_high);
    let decision = choose_split(&cfg.low_gpu, &high, &stats, a.input_len);
    if let Some(table) = candidate_table(&cfg.low_gpu, &high, &stats, a.input_len) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "partial_len", "t_prefill_ms", "t_chunked_ms", "gap_ms"])
            .map_err(anyhow::Error::from)?;
        for c in &table {
            w.write_record([
                c.index.to_string(),
                c.partial_len.to_string(),
                format!("{:.6}", c.t_prefill),
                format!("{:.6}", c.t_chunked),
                format!("{:.6}", c.gap()),
            ])
            .map_err(anyhow::Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
        // A closed pipe (`| head`) is not an error.
        let _ = std::io::stdout().lock().write_all(&bytes);
    }
    eprintln!(
        "chosen partial_len {} (index {:?}, full_on_ppi {}, saturated {})",
        decision.partial_len, decision.candidate_index, decision.full_on_ppi, decision.saturated
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let arrival: ArrivalMode = a.arrival.parse()?;
    let trace = synth_trace(&SynthParams::new(a.n, a.mean_in, a.mean_out, arrival, a.seed))?;
    save_trace(&trace, &a.out)?;
    let (mi, mo) = trace.mean_lengths();
    eprintln!("{} requests, mean in {mi:.1} out {mo:.1}, hash {}", trace.len(), trace.content_hash());
    Ok(())
}

fn cmd_check(a: CheckArgs) -> CmdResult {
    let cfg = load_config(&a.config, None)?;
    let trace = load_trace_args(&a.trace, cfg.seed)?;
    let reports = compare_policies(&cfg, &Policy::ALL, &trace, Execution::Parallel)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let checks = directional_checks(&reports);
    for c in &checks {
        println!("{} {:<50} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
