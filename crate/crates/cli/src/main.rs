use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use varkernel::EvalMode;
use varkernel_cli::commands::{self, EvalOptions};
use varkernel_cli::RunConfig;

#[derive(Parser)]
#[command(name = "varkernel", version, about = "Meta-learned kernels from variational random Fourier features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Trained checkpoint (checkpoint.json; the .bin sidecar is read if present).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config to check against the checkpoint, or to run baseline mode from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EvalMode>,
    /// Evaluate with a different number of support shots than training used.
    #[arg(long)]
    shots: Option<usize>,
    /// NAME=VALUE for one of the seeds tasks, init, sampling.
    #[arg(long = "seed-override", value_name = "K=V")]
    seed_override: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train from a config file, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "seed-override", value_name = "K=V")]
        seed_override: Vec<String>,
    },
    /// Evaluate on held-out tasks and print metrics as JSON.
    Eval(EvalArgs),
    /// Dump dense-grid predictions for one eval task as CSV.
    ExportCurves {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        task_id: usize,
        #[arg(long, default_value_t = 200)]
        grid_points: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: varkernel::Error| e.to_string())
}

impl EvalArgs {
    fn options(&self) -> anyhow::Result<EvalOptions> {
        Ok(EvalOptions {
            checkpoint: self.checkpoint.clone(),
            config: self.config.as_deref().map(RunConfig::load).transpose()?,
            episodes: self.episodes,
            mode: self.mode,
            shots: self.shots,
            seed_overrides: self.seed_override.clone(),
        })
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            seed_override,
        } => {
            let mut config = RunConfig::load(&config)?;
            config.apply_seed_overrides(&seed_override)?;
            let summary = commands::train(&config, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary.final_eval)?);
        }
        Command::Eval(args) => {
            let report = commands::eval(&args.options()?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::ExportCurves {
            eval,
            task_id,
            grid_points,
            output,
        } => {
            let rows = commands::export_curves(&eval.options()?, task_id, grid_points)?;
            match output {
                Some(path) => {
                    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    commands::write_curves(&rows, file)?;
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    commands::write_curves(&rows, &mut lock)?;
                    lock.flush()?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
