//! `smp` command-line front end.
//!
//! Exit codes:
//!
//! | code | class |
//! |---|---|
//! | 0 | success |
//! | 1 | internal error (shape, domain or contract violation) |
//! | 2 | configuration or usage error |
//! | 3 | dataset error |
//! | 4 | I/O error |
//! | 5 | malformed file (bad magic, unknown version, truncation) |
//! | 6 | fingerprint mismatch between files and model |
//! | 7 | training diverged |

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smp_core::{Error, FormatError};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "smp",
    version,
    about = "Learn binary masks over a frozen transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/dev TSV splits.
    GenData(Overrides),
    /// Train one model and write its report, masks and checkpoint.
    Train(Overrides),
    /// Train every (method, remaining) pair and write a combined CSV.
    Sweep(SweepArgs),
    /// Density tables of a mask artifact.
    Analyze(AnalyzeArgs),
    /// Remove pruned rows and heads from a checkpoint.
    Compact(CompactArgs),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["smp", "magnitude", "movement", "dense"])]
    method: Option<String>,
    #[arg(long = "mask-fn", value_parser = ["local", "global", "smp", "threshold"])]
    mask_fn: Option<String>,
    #[arg(long)]
    remaining: Option<f64>,
    #[arg(long = "lambda-r")]
    lambda_r: Option<f64>,
    /// Score learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "ramp-steps")]
    ramp_steps: Option<usize>,
    #[arg(long)]
    kd: bool,
    /// Dense checkpoint used as the distillation teacher.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated remaining ratios.
    #[arg(long)]
    ratios: Option<String>,
    /// Comma-separated methods.
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Overrides,
    /// Mask artifact to analyze.
    #[arg(long)]
    artifact: PathBuf,
    /// Checkpoint whose configuration the artifact must match. Without it
    /// the model section of the configuration is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompactArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Drop FFN units whose up-projection row keeps fewer weights than this.
    #[arg(long = "min-row-weights")]
    min_row_weights: Option<usize>,
}

impl Overrides {
    fn apply(&self) -> smp_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: Option<String>| match v {
            Some(v) => cfg.set(k, &v),
            None => Ok(()),
        };
        set("method", self.method.clone())?;
        set("mask_fn", self.mask_fn.clone())?;
        set("remaining", self.remaining.map(|v| v.to_string()))?;
        set("lambda_r", self.lambda_r.map(|v| v.to_string()))?;
        set("lr", self.lr.map(|v| v.to_string()))?;
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("ramp_steps", self.ramp_steps.map(|v| v.to_string()))?;
        set("kd", self.kd.then(|| "true".to_string()))?;
        set(
            "teacher",
            self.teacher.as_ref().map(|p| p.display().to_string()),
        )?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("out", self.out.as_ref().map(|p| p.display().to_string()))?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Shape { .. } | Error::Domain { .. } | Error::Contract(_) => 1,
        Error::Config(_) => 2,
        Error::Dataset(_) => 3,
        Error::Io { .. } => 4,
        Error::Format(FormatError::FingerprintMismatch { .. }) => 6,
        Error::Format(_) => 5,
        Error::Diverged(_) => 7,
    }
}

fn run(cli: Cli) -> smp_core::Result<()> {
    match cli.command {
        Command::GenData(o) => commands::gen_data(&o.apply()?),
        Command::Train(o) => commands::train(&o.apply()?),
        Command::Sweep(a) => {
            let mut cfg = a.common.apply()?;
            if let Some(r) = a.ratios {
                cfg.set("sweep_remaining", &r)?;
            }
            if let Some(m) = a.methods {
                cfg.set("sweep_methods", &m)?;
            }
            commands::sweep(&cfg)
        }
        Command::Analyze(a) => {
            commands::analyze(&a.common.apply()?, &a.artifact, a.checkpoint.as_deref())
        }
        Command::Compact(a) => {
            let mut cfg = a.common.apply()?;
            if let Some(k) = a.min_row_weights {
                cfg.min_row_weights = k;
            }
            commands::compact(&cfg, &a.artifact, &a.checkpoint)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
