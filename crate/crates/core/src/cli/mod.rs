//! The `icarus` command line: `verify`, `train` and `sim`.
//!
//! Each subcommand reads an optional TOML file (see [`RunConfig`]), applies
//! flag overrides on top, and writes its results plus a `manifest.json`
//! with SHA-256 hashes into `--out`.

mod config;
mod manifest;
pub mod verify;

pub use config::RunConfig;
pub use manifest::{sha256_hex, Artifact, OutputDir, RunManifest, MANIFEST_FILE};
pub use verify::{run_suites, SuiteOutcome, VerifyConfig};

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::cache::{CacheMode, EvictionPolicy};
use crate::error::{Error, Result};
use crate::runtime::DecodePath;
use crate::sim::{summary_json, table_csv};
use crate::train::{train_loop, TrainConfig, TrainMode};

/// Rows averaged for the reported final loss.
pub const FINAL_LOSS_WINDOW: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "icarus",
    version,
    about = "Shared-KV multi-model inference: checks, toy training, serving sweeps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the self-check suites; nonzero exit if any fails.
    Verify(VerifyArgs),
    /// Train ICaRus and conventional adapters on the toy corpus.
    Train(TrainArgs),
    /// Sweep the serving simulator over modes, agent counts and QPS.
    Sim(SimArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Attach key/value adapters to the task model (the KV suite must fail).
    #[arg(long)]
    pub inject_kv_adapter: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Train one mode only (icarus or conventional).
    #[arg(long, value_parser = parse::<TrainMode>)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run one cache mode only (baseline or icarus).
    #[arg(long, value_parser = parse::<CacheMode>)]
    pub mode: Option<CacheMode>,
    /// Comma-separated agent counts.
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<usize>>,
    /// Comma-separated arrival rates.
    #[arg(long, value_delimiter = ',')]
    pub qps: Option<Vec<f64>>,
    /// KV pool budget in MiB.
    #[arg(long)]
    pub budget_mb: Option<f64>,
    #[arg(long, value_parser = parse::<EvictionPolicy>)]
    pub eviction: Option<EvictionPolicy>,
    #[arg(long, value_parser = parse::<DecodePath>)]
    pub path: Option<DecodePath>,
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn open_out(common: &CommonArgs, sub: &str, cfg: &RunConfig) -> Result<OutputDir> {
    let mut out = OutputDir::create(&common.out, sub, common.config.as_deref(), cfg.seed)?;
    let resolved = serde_json::to_string_pretty(cfg).expect("config serialises") + "\n";
    out.write("config.json", resolved.as_bytes())?;
    Ok(out)
}

/// Run a parsed command line. Returns the process exit code; progress and
/// summaries go to `log`.
pub fn execute(cli: &Cli, log: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Verify(a) => cmd_verify(a, log),
        Command::Train(a) => cmd_train(a, log),
        Command::Sim(a) => cmd_sim(a, log),
    }
}

pub fn cmd_verify(args: &VerifyArgs, log: &mut dyn Write) -> Result<i32> {
    let mut cfg = load(&args.common)?;
    cfg.verify.inject_kv_adapter |= args.inject_kv_adapter;
    let mut out = open_out(&args.common, "verify", &cfg)?;
    let suites = run_suites(&cfg.model, &cfg.verify)?;
    for s in &suites {
        let tag = if s.passed { "PASS" } else { "FAIL" };
        writeln!(log, "{tag} {:<20} {}", s.name, s.detail)?;
    }
    let summary = serde_json::to_string_pretty(&json!({ "seed": cfg.verify.seed, "suites": suites }))
        .expect("summary serialises")
        + "\n";
    out.write("verify.json", summary.as_bytes())?;
    out.finish()?;
    writeln!(log, "summary sha256 {}", sha256_hex(summary.as_bytes()))?;
    let failed = suites.iter().filter(|s| !s.passed).count();
    if failed > 0 {
        writeln!(log, "{failed} of {} suites failed", suites.len())?;
        return Ok(1);
    }
    Ok(0)
}

pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> Result<i32> {
    let mut cfg = load(&args.common)?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let modes = match args.mode {
        Some(m) => vec![m],
        None => vec![TrainMode::Icarus, TrainMode::Conventional],
    };
    cfg.train.validate(&cfg.model)?;
    let mut out = open_out(&args.common, "train", &cfg)?;
    let mut runs = Vec::new();
    for mode in modes {
        let tc = TrainConfig {
            mode,
            ..cfg.train.clone()
        };
        let o = train_loop(&cfg.model, &tc)?;
        out.write(&format!("loss_{mode}.csv"), o.trace.to_csv().as_bytes())?;
        out.write(&format!("adapters_{mode}.ckpt"), &o.checkpoint)?;
        let first = o.trace.first();
        let last = o.trace.tail_mean(FINAL_LOSS_WINDOW);
        match (first, last) {
            (Some(f), Some(l)) => writeln!(log, "{mode:<12} first loss {f:.4}  final loss {l:.4}")?,
            _ => writeln!(log, "{mode:<12} no steps")?,
        }
        runs.push(json!({
            "mode": mode,
            "steps": o.trace.losses.len(),
            "first_loss": first,
            "final_loss": last,
            "base_hash": o.base_hash,
        }));
    }
    let summary = serde_json::to_string_pretty(&json!({ "final_loss_window": FINAL_LOSS_WINDOW, "runs": runs }))
        .expect("summary serialises")
        + "\n";
    out.write("train_summary.json", summary.as_bytes())?;
    out.finish()?;
    Ok(0)
}

pub fn cmd_sim(args: &SimArgs, log: &mut dyn Write) -> Result<i32> {
    let cfg = load(&args.common)?;
    let mut sim = cfg.sim.clone();
    if let Some(m) = args.mode {
        sim.modes = vec![m];
    }
    if let Some(a) = &args.agents {
        sim.agents = a.clone();
    }
    if let Some(q) = &args.qps {
        sim.qps = q.clone();
    }
    if let Some(mb) = args.budget_mb {
        if !(mb > 0.0) {
            return Err(Error::Config(format!("--budget-mb must be positive, got {mb}")));
        }
        sim.budget.kv_bytes = (mb * (1u64 << 20) as f64) as u64;
    }
    if let Some(e) = args.eviction {
        sim.budget.policy = e;
    }
    if let Some(p) = args.path {
        sim.path = p;
    }
    sim.validate()?;
    let resolved = RunConfig { sim, ..cfg };
    let mut out = open_out(&args.common, "sim", &resolved)?;
    let reports = resolved.sim.sweep()?;
    for r in &reports {
        writeln!(
            log,
            "{:<8} agents {:>2} qps {:>6} p95 {:>10.3} throughput {:.4} evictions {}",
            r.mode.name(),
            r.agents,
            r.qps,
            r.p95_latency,
            r.throughput,
            r.evictions
        )?;
    }
    out.write("sim.csv", table_csv(&reports).as_bytes())?;
    out.write("summary.json", summary_json(&reports).as_bytes())?;
    out.finish()?;
    Ok(0)
}
