use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::{error, info, warn};

use startsel::envs::Env;
use startsel::sac::load_agent;
use startsel_harness::evaluate::{evaluate, noise_sweep, write_sweep};
use startsel_harness::overhead::{report_overhead, OVERHEAD_COLUMNS};
use startsel_harness::records::{merge_records, read_records};
use startsel_harness::{run_seeds, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "startsel", version, about = "SAC training with GP-guided start-state selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set sac.gamma=0.98`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and merge the per-seed records.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Evaluate a checkpoint on every cell of the noise grid.
    NoiseSweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-environment overhead ratio of gp-condition against default.
    ReportOverhead {
        /// Run-record CSVs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Parse and check a config, then print it with defaults filled in.
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, HarnessError> {
    ExperimentConfig::load(&args.config, &args.overrides)
}

fn train(config: &ExperimentConfig, jobs: usize) -> anyhow::Result<bool> {
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let mut ok = true;
    let mut csvs = Vec::new();
    for (seed, result) in run_seeds(config, jobs) {
        match result {
            Ok(outcome) => {
                if let Some(reason) = &outcome.aborted {
                    warn!("seed {seed} aborted: {reason}");
                    ok = false;
                }
                info!(
                    "seed {seed}: {} steps, best eval {:?}",
                    outcome.steps, outcome.best_eval
                );
                csvs.push(outcome.csv);
            }
            Err(e) => {
                error!("seed {seed} failed: {e}");
                ok = false;
            }
        }
    }
    if !csvs.is_empty() {
        let merged = config.output_dir.join("runs.csv");
        let n = merge_records(&csvs, &merged)?;
        info!("{n} rows merged into {}", merged.display());
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::ValidateConfig { config } => {
            print!("{}", load(&config)?.to_toml());
        }
        Command::Train { config, jobs } => {
            let config = load(&config)?;
            match train(&config, jobs) {
                Ok(true) => {}
                Ok(false) => return Ok(ExitCode::from(3)),
                Err(e) => return Err(HarnessError::Aborted(format!("{e:#}"))),
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            eval_seed,
        } => {
            let config = load(&config)?;
            let (agent, _) = load_agent::<f64>(&checkpoint)?;
            let mut env = Env::make(&config.env_id)?;
            let r = evaluate(&agent, &mut env, config.noise.eval, config.eval_episodes, eval_seed)?;
            println!(
                "{}",
                serde_json::json!({"mean": r.mean, "std": r.std, "episodes": r.returns.len()})
            );
        }
        Command::NoiseSweep {
            config,
            checkpoint,
            eval_seed,
            out,
        } => {
            let config = load(&config)?;
            let rows = noise_sweep(&config, &checkpoint, eval_seed)?;
            write_sweep(&rows, &out)?;
            info!("{} sweep cells written to {}", rows.len(), out.display());
        }
        Command::ReportOverhead { runs } => {
            let mut rows = Vec::new();
            for p in &runs {
                rows.extend(read_records(p)?);
            }
            let report = report_overhead(&rows)?;
            println!("{}", OVERHEAD_COLUMNS.join(","));
            for r in report {
                println!("{}", r.to_record().join(","));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
