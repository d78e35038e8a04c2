use std::path::PathBuf;
use std::process::ExitCode;

use cen_cli::run::{self, Overrides};
use cen_cli::Result;
use clap::{Args, Parser, Subcommand};

/// Channel-exchanging network experiments on synthetic multimodal data.
#[derive(Parser)]
#[command(name = "cen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and shuffling (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant, e.g. cen, no-exchange, zero-out, concat, unimodal:0.
    #[arg(long)]
    variant: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, variant: self.variant.clone(), out: self.out.clone(), ..Overrides::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and its complementarity certificates.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write metrics, traces, a checkpoint and a summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to OUT/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per (lambda, theta) pair of the sweep section.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Train every ablation row on every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (overrides the config).
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        /// Number of consecutive seeds (overrides the config).
        #[arg(long)]
        seeds: Option<u64>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = run::resolve(common.config.as_deref(), &common.overrides())?;
            run::gen_data(&cfg)?;
            println!("dataset written to {}", cfg.output.dir);
        }
        Command::Train { common, resume } => {
            let cfg = run::resolve(common.config.as_deref(), &common.overrides())?;
            let s = run::train(&cfg, resume.as_deref())?;
            println!("{} seed {}: ensemble loss {} after {} steps", s.variant, s.seed, s.ensemble_loss(), s.steps);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = run::resolve(common.config.as_deref(), &common.overrides())?;
            let s = run::eval(&cfg, checkpoint.as_deref())?;
            println!("{} seed {}: ensemble loss {}", s.variant, s.seed, s.ensemble_loss());
        }
        Command::Sweep { common } => {
            let cfg = run::resolve(common.config.as_deref(), &common.overrides())?;
            for e in run::sweep(&cfg)? {
                println!("lambda {} theta {}: ensemble loss {} exchanged {}", e.lambda, e.theta, e.ensemble_loss, e.exchanged_fraction);
            }
        }
        Command::Ablate { common, rows, seeds } => {
            let ov = Overrides { rows, seeds, ..common.overrides() };
            let cfg = run::resolve(common.config.as_deref(), &ov)?;
            for r in run::ablate(&cfg)? {
                println!("{}: {:?} (first row not worse on {}/{})", r.row, r.ensemble_loss, r.first_row_not_worse, r.seeds.len());
            }
        }
    }
    Ok(())
}
