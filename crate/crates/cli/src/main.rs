mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use attnvat::advtrain::TrainError;
use attnvat::checkpoint::CheckpointError;
use attnvat::textdata::DataError;
use clap::{Parser, Subcommand};

use commands::SynthSizes;
use config::{RunConfig, TrainFlags, UsageError};

/// Virtual adversarial training on the attention of a BiLSTM classifier.
#[derive(Debug, Parser)]
#[command(name = "attnvat", version)]
struct Cli {
    /// Global random seed; overrides the config file.
    #[arg(long, env = "ATTNVAT_SEED", global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// F1 and attention/gradient correlation of a checkpoint on a test corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hard and soft rationale agreement of attention with gold spans.
    Rationale {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Attention quantile above which tokens form the hard rationale.
        #[arg(long, default_value_t = 0.8)]
        quantile: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation F1 against the number of unlabeled examples.
    SweepUnlabeled {
        #[command(flatten)]
        flags: TrainFlags,
        /// Unlabeled counts, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        /// Number of seeds per count, starting at the global seed.
        #[arg(long, default_value_t = 5)]
        n_seeds: u64,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per epsilon and report the best by validation F1.
    EpsilonSearch {
        #[command(flatten)]
        flags: TrainFlags,
        /// Comma-separated epsilons; defaults to 8 log-spaced points in [0.01, 30].
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Option<Vec<f64>>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic train/valid/test/unlabeled corpora as JSON Lines.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_valid: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 5000)]
        n_unlabeled: usize,
        /// Two-keyword linearly separable task instead of the default one.
        #[arg(long)]
        separable: bool,
    },
}

fn print_json(value: &impl serde::Serialize, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { flags, out } => {
            let cfg = RunConfig::resolve(&flags, cli.seed)?;
            commands::cmd_train(&cfg, &out)?;
            println!("{}", out.display());
        }
        Command::Evaluate { checkpoint, test, out } => {
            let report = commands::cmd_evaluate(&checkpoint, &test)?;
            print_json(&report, out.as_ref())?;
        }
        Command::Rationale {
            checkpoint,
            corpus,
            quantile,
            out,
        } => {
            let report = commands::cmd_rationale(&checkpoint, &corpus, quantile)?;
            print_json(&report, out.as_ref())?;
        }
        Command::SweepUnlabeled {
            flags,
            counts,
            n_seeds,
            out,
        } => {
            let cfg = RunConfig::resolve(&flags, cli.seed)?;
            let seeds: Vec<u64> = (0..n_seeds).map(|i| cfg.seed + i).collect();
            let rows = commands::cmd_sweep(&cfg, &counts, &seeds)?;
            commands::write_sweep(&out, &rows)?;
            for r in &rows {
                println!("count {:>6}  mean F1 {:.4}  std {:.4}", r.count, r.mean_f1, r.std_f1);
            }
        }
        Command::EpsilonSearch { flags, grid, out } => {
            let cfg = RunConfig::resolve(&flags, cli.seed)?;
            let grid = grid.unwrap_or_else(commands::default_epsilon_grid);
            commands::cmd_epsilon_search(&cfg, &grid, &out)?;
        }
        Command::GenSynth {
            out,
            n_train,
            n_valid,
            n_test,
            n_unlabeled,
            separable,
        } => {
            let sizes = SynthSizes {
                train: n_train,
                valid: n_valid,
                test: n_test,
                unlabeled: n_unlabeled,
            };
            for path in commands::cmd_gen_synth(&out, &sizes, separable, cli.seed.unwrap_or(0))? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// 2 for usage and configuration errors, 3 for data and checkpoint errors,
/// 4 for training divergence, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::Diverged { .. } => return 4,
                TrainError::Contract(_) => return 2,
                _ => {}
            }
        }
        if cause.is::<DataError>() || cause.is::<CheckpointError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
