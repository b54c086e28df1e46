//! `uomo`: synthetic-city forecasting experiments end to end — data
//! generation, masked-diffusion pretraining, context-aware fine-tuning,
//! evaluation, and the downstream network optimizers.

mod commands;
mod config;
mod report;
mod runs;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "uomo", version, about = "Mobile-traffic forecasting pipeline and network optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Task override (short|long|gen).
    #[arg(long)]
    task: Option<String>,
    /// Few-shot fraction override.
    #[arg(long)]
    fraction: Option<f64>,
    /// Output directory (defaults to a timestamped dir under the run root).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as key=value, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding the city files (a `synth` run directory).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Clone)]
struct CkptArgs {
    /// Model checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic city (traffic, users, POI).
    Synth(CommonArgs),
    /// Pretrain the masked-diffusion model on a city.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Contrastive fine-tuning against user dynamics and POI context.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Forecast one task on the city's last window.
    Forecast {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Forecast with the generation task (no history).
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Run all three tasks plus the historical-average baseline, or the
    /// zero/few-shot protocol with --fewshot.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        fewshot: bool,
    },
    /// Estimate demand with the generation task and place base stations.
    OptimizeDeploy {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Estimate loads with the long-term task and schedule RRU sleep.
    OptimizeSleep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Merge metric rows from run directories into a CSV and a summary.
    Report {
        /// Run directories to merge.
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    category: &'a str,
    error: &'a str,
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.set)
        .map_err(|e| CliError::Config(format!("{e:#}")))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(task) = &common.task {
        cfg.task = task.clone();
    }
    if let Some(fraction) = common.fraction {
        cfg.fraction = fraction;
    }
    validate(&cfg)?;
    Ok(cfg)
}

/// Check the derived objects up front so bad configs fail before any
/// work starts.
fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let err = |e: String| CliError::Config(e);
    commands::token_spec(cfg).map_err(|e| err(format!("{e:#}")))?;
    commands::denoiser_config(cfg).map_err(|e| err(format!("{e:#}")))?;
    commands::schedule_spec(cfg).build().map_err(|e| err(e.to_string()))?;
    commands::task_spec(&cfg.task, cfg.window_t).map_err(|e| err(format!("{e:#}")))?;
    if cfg.city_h % cfg.h0 != 0 || cfg.city_v % cfg.v0 != 0 || cfg.city_t % cfg.window_t != 0 || cfg.window_t % cfg.t0 != 0 {
        return Err(err(format!(
            "city {}x{}x{} must divide into windows of {} and tokens of ({},{},{})",
            cfg.city_h, cfg.city_v, cfg.city_t, cfg.window_t, cfg.h0, cfg.v0, cfg.t0
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let runtime = |e: anyhow::Error| CliError::Runtime(format!("{e:#}"));
    match cli.command {
        Command::Synth(common) => {
            let cfg = resolve_config(&common)?;
            commands::cmd_synth(&cfg, common.out.as_deref()).map_err(runtime)?;
        }
        Command::Train { common, data } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_train(&cfg, &data.data, common.out.as_deref()).map_err(runtime)?;
        }
        Command::Finetune { common, data, ckpt } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_finetune(&cfg, &data.data, &ckpt.ckpt, common.out.as_deref()).map_err(runtime)?;
        }
        Command::Forecast { common, data, ckpt } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_forecast(&cfg, &data.data, &ckpt.ckpt, common.out.as_deref()).map_err(runtime)?;
        }
        Command::Generate { common, data, ckpt } => {
            let mut cfg = resolve_config(&common)?;
            cfg.task = "gen".into();
            commands::cmd_forecast(&cfg, &data.data, &ckpt.ckpt, common.out.as_deref()).map_err(runtime)?;
        }
        Command::Evaluate { common, data, ckpt, fewshot } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_evaluate(&cfg, &data.data, &ckpt.ckpt, fewshot, common.out.as_deref()).map_err(runtime)?;
        }
        Command::OptimizeDeploy { common, data, ckpt } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_optimize_deploy(&cfg, &data.data, &ckpt.ckpt, common.out.as_deref()).map_err(runtime)?;
        }
        Command::OptimizeSleep { common, data, ckpt } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_optimize_sleep(&cfg, &data.data, &ckpt.ckpt, common.out.as_deref()).map_err(runtime)?;
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                return Err(CliError::Config("report needs at least one run directory".into()));
            }
            commands::cmd_report(&dirs, out.as_deref()).map_err(runtime)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, message, code) = match &e {
                CliError::Config(m) => ("config", m.as_str(), 1),
                CliError::Runtime(m) => ("runtime", m.as_str(), 2),
            };
            let record = ErrorRecord { category, error: message };
            eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
            ExitCode::from(code)
        }
    }
}
