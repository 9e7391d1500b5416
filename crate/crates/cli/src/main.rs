use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stmtl_cli::commands::{self, Split};
use stmtl_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "stmtl", version, about = "Operation search for spatio-temporal multi-task forecasting")]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as features.csv and graph.csv.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train weights of the search-width model under fixed architecture logits.
    Pretrain,
    /// Bi-level search; writes architecture.json.
    Search,
    /// Train the derived architecture at full width and report test metrics.
    Retrain,
    /// Pretrain, search and retrain in sequence.
    RunAll,
    /// Metrics of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-row predictions to this CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Full pipeline for one ablation: no_alpha, no_beta or no_shared.
    Ablate {
        #[arg(long)]
        variant: String,
    },
}

fn run(cli: Cli) -> stmtl::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::SynthData { out: dir } => commands::synth_data(&cfg, dir.as_deref(), &mut out),
        Command::Pretrain => commands::pretrain(&cfg, &mut out),
        Command::Search => commands::search(&cfg, &mut out).map(drop),
        Command::Retrain => commands::retrain(&cfg, &mut out).map(drop),
        Command::RunAll => commands::run_all(&cfg, &mut out).map(drop),
        Command::Evaluate {
            checkpoint,
            split,
            predictions,
        } => {
            let split: Split = split.parse()?;
            commands::evaluate(&cfg, &checkpoint, split, predictions.as_deref(), &mut out).map(drop)
        }
        Command::Ablate { variant } => commands::ablate(&cfg, &variant, &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
