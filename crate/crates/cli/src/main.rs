//! `dmg-lab`: generate synthetic suites, train, evaluate and sweep.
//!
//! All artifacts go to files under the output directory; diagnostics go to
//! stderr and nothing is written to stdout.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dmg_core::data::{generate, DomainSuite};
use dmg_core::eval::{evaluate, lambda_sweep, EvalReport, InferenceMode, SweepParam, SweepRow};
use dmg_core::train::{train, Checkpoint};
use serde::Serialize;

use crate::config::RunConfig;

const SWEEP_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "dmg-lab", version, about = "Domain-specific mask experiments on synthetic multi-domain data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one CSV per domain plus manifest.json to <out>/data.
    Generate(Common),
    /// Train on the dataset; writes checkpoint.json and train_report.json.
    Train(Common),
    /// Evaluate a checkpoint; writes eval_report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated inference modes, e.g. pred-ens,mask-ens,kd.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<InferenceMode>>,
    },
    /// Train and evaluate one run per λ value; writes sweep.json and runs/.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda_O or lambda_S.
        #[arg(long)]
        param: Option<SweepParam>,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Concurrent runs (DMG_LAB_DETERMINISTIC=1 forces 1).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Generate, train and evaluate in one go.
    Report(Common),
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.override_seed(common.seed);
    let out = cfg.out_dir(common.out.as_deref());
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_suite(dir: &Path) -> Result<DomainSuite> {
    if !dir.join("manifest.json").exists() {
        bail!("no dataset at {} (run `dmg-lab generate` first)", dir.display());
    }
    DomainSuite::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn with_config(report: &impl Serialize, echo: &serde_json::Value) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(report)?;
    value["config"] = echo.clone();
    Ok(value)
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<DomainSuite> {
    let suite = generate(&cfg.data)?;
    let dir = cfg.data_dir(out);
    suite.save(&dir).with_context(|| format!("writing dataset to {}", dir.display()))?;
    eprintln!("wrote dataset {} ({} domains)", dir.display(), suite.domains().count());
    Ok(suite)
}

fn cmd_train(cfg: &RunConfig, out: &Path, suite: &DomainSuite) -> Result<Checkpoint> {
    let (ckpt, report) = train(&cfg.train, suite)?;
    let path = out.join("checkpoint.json");
    ckpt.save(&path).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    write_json(&out.join("train_report.json"), &with_config(&report, &cfg.echo())?)?;
    Ok(ckpt)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, ckpt: &Checkpoint, suite: &DomainSuite) -> Result<EvalReport> {
    let mut report = evaluate(ckpt, suite, &cfg.eval)?;
    report.config = cfg.echo();
    write_json(&out.join("eval_report.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct SweepTable<'a> {
    schema_version: u32,
    config: serde_json::Value,
    param: SweepParam,
    rows: Vec<&'a SweepRow>,
    wall_time_s: f64,
}

fn run_dir_name(param: SweepParam, value: f64) -> String {
    format!("{param}={value:e}")
}

fn cmd_sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<()> {
    let started = Instant::now();
    let suite = load_suite(&cfg.data_dir(out))?;
    let runs = lambda_sweep(&cfg.train, cfg.sweep.param, &cfg.sweep.values, &suite, &cfg.eval, jobs)?;
    let echo = cfg.echo();
    for run in &runs {
        let dir = out.join("runs").join(run_dir_name(cfg.sweep.param, run.row.lambda));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if let Some(err) = &run.row.error {
            eprintln!("run {}={} failed: {err}", cfg.sweep.param, run.row.lambda);
        }
        if let Some(ckpt) = &run.checkpoint {
            ckpt.save(&dir.join("checkpoint.json"))?;
        }
        if let Some(report) = &run.train_report {
            write_json(&dir.join("train_report.json"), &with_config(report, &echo)?)?;
        }
        if let Some(report) = &run.eval_report {
            let mut report = report.clone();
            report.config = echo.clone();
            write_json(&dir.join("eval_report.json"), &report)?;
        }
    }
    let table = SweepTable {
        schema_version: SWEEP_SCHEMA_VERSION,
        config: echo,
        param: cfg.sweep.param,
        rows: runs.iter().map(|r| &r.row).collect(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("sweep.json"), &table)
}

fn effective_jobs(flag: Option<usize>) -> usize {
    if std::env::var("DMG_LAB_DETERMINISTIC").is_ok_and(|v| v == "1") {
        return 1;
    }
    flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = resolve(&common)?;
            cmd_generate(&cfg, &out)?;
        }
        Command::Train(common) => {
            let (cfg, out) = resolve(&common)?;
            let suite = load_suite(&cfg.data_dir(&out))?;
            cmd_train(&cfg, &out, &suite)?;
        }
        Command::Eval { common, modes } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(modes) = modes {
                cfg.eval.modes = modes;
            }
            let suite = load_suite(&cfg.data_dir(&out))?;
            let path = cfg.checkpoint_path(&out);
            let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            cmd_eval(&cfg, &out, &ckpt, &suite)?;
        }
        Command::Sweep { common, param, values, jobs } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(p) = param {
                cfg.sweep.param = p;
            }
            if let Some(v) = values {
                cfg.sweep.values = v;
            }
            cmd_sweep(&cfg, &out, effective_jobs(jobs))?;
        }
        Command::Report(common) => {
            let (cfg, out) = resolve(&common)?;
            let suite = cmd_generate(&cfg, &out)?;
            let ckpt = cmd_train(&cfg, &out, &suite)?;
            cmd_eval(&cfg, &out, &ckpt, &suite)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
