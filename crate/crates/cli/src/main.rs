//! `dfqlab`: staged driver for data-free PTQ calibration experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration, 4 missing or modified upstream artifact.

mod manifest;
mod pipeline;
mod report;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dfqlab::experiment::ExperimentConfig;

use pipeline::{Run, Stage};

/// Failures with a dedicated exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Artifact(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "invalid configuration: {m}"),
            Failure::Artifact(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

#[derive(Debug, Parser)]
#[command(name = "dfqlab", version, about = "Data-free PTQ calibration experiments on a procedural image world")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run only these seeds (repeatable); replaces the config's seed list.
    #[arg(long = "seed", global = true, value_name = "N")]
    seeds: Vec<u64>,
    /// Recompute stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Output base directory [default: config `output_dir`, then ./out].
    #[arg(long, global = true, env = "DFQLAB_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write prompt manifests for every synthetic strategy.
    GenPrompts,
    /// Sample real data and render calibration sets.
    Synth,
    /// Train the full-precision reference model of every seed.
    TrainRef,
    /// Quantize every reference model with every calibration set.
    Calibrate,
    /// Per-class RPC-FID of single-class renders.
    Rpcfid,
    /// Export gradient-norm traces and plot data.
    Gradtrace,
    /// Run the pipeline up to the strategy comparison.
    Compare,
    /// Run everything and write a markdown report.
    Report,
    /// Print the resolved configuration and its run directory.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let stage = match cli.command {
        Command::GenPrompts => Stage::GenPrompts,
        Command::Synth => Stage::Synth,
        Command::TrainRef => Stage::TrainRef,
        Command::Calibrate => Stage::Calibrate,
        Command::Rpcfid => Stage::Rpcfid,
        Command::Gradtrace => Stage::Gradtrace,
        Command::Compare => Stage::Compare,
        Command::Report => Stage::Report,
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            eprintln!("run directory: {}", out.join(cfg.short_hash()).display());
            return Ok(());
        }
    };
    let mut run = Run::open(cfg, &out, cli.force)?;
    run.ensure(stage)?;
    match run.headline(stage) {
        Some(p) => print!("{}", fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?),
        None => println!("{}", run.root.display()),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 3,
                Failure::Artifact(_) => 4,
            };
        }
        match cause.downcast_ref::<dfqlab::Error>() {
            Some(dfqlab::Error::Config(_)) => return 3,
            Some(dfqlab::Error::MissingArtifact(_)) => return 4,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
