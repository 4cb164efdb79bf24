use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prunebench_cli::commands::{self, Overrides};

#[derive(Parser)]
#[command(name = "prunebench", version, about = "Pruning vs. adversarial robustness lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds to run, overriding the config.
    #[arg(long)]
    seeds: Option<usize>,
    /// Evaluation subset size, overriding the config.
    #[arg(long)]
    subset: Option<usize>,
    /// Worker thread count (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seeds,
            subset: self.subset,
            jobs: self.jobs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full prune / fine-tune / attack sweep.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for the report and artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Reuse per-cell artifacts from a previous run in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Render tables and curves from a finished run directory.
    Report {
        /// The --out directory of a previous run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense model and print calibrated epsilon grids.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Attack a single evaluation image and print the outcome.
    AttackOne {
        #[command(flatten)]
        common: CommonArgs,
        /// Attack kind: linf, l2, or l0.
        #[arg(long)]
        attack: String,
        /// Index into the evaluation subset.
        #[arg(long)]
        index: usize,
        /// Perturbation budget (required for linf).
        #[arg(long)]
        eps: Option<f64>,
        /// Load this model checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { common, out, resume } => {
            commands::cmd_run(common.config.as_deref(), out, &common.overrides(), *resume)
        }
        Command::Report { out } => commands::cmd_report(out).map(|()| 0),
        Command::Calibrate { common } => {
            commands::cmd_calibrate(common.config.as_deref(), &common.overrides()).map(|()| 0)
        }
        Command::AttackOne {
            common,
            attack,
            index,
            eps,
            checkpoint,
        } => commands::cmd_attack_one(
            common.config.as_deref(),
            checkpoint.as_deref(),
            attack,
            *index,
            *eps,
            &common.overrides(),
        )
        .map(|()| 0),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
