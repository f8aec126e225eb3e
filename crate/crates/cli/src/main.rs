//! `freqd` command line: dataset preparation, backbone training, feature
//! distillation, spectral verification, and evaluation.
//!
//! Exit codes: 0 success, 1 validation or verification failure, 2 usage
//! error. `FREQD_THREADS` caps internal parallelism.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(anyhow::Error),
}

#[derive(Parser)]
#[command(
    name = "freqd",
    version,
    about = "Frequency-aware feature distillation for embedding recommenders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw interactions, filter low-activity entities, split 8:1:1
    Prepare(cli::PrepareArgs),
    /// Train a teacher backbone with early stopping
    TrainTeacher(cli::TrainArgs),
    /// Train a student backbone without distillation
    TrainStudent(cli::TrainArgs),
    /// Distill a student from a frozen teacher with the filtered loss
    Distill(cli::DistillArgs),
    /// Run the spectral identity checks on random instances
    Verify(cli::VerifyArgs),
    /// Per-knowledge-group distillation losses for a checkpoint pair
    Spectrum(cli::SpectrumArgs),
    /// Full-ranking Recall@N / NDCG@N for a checkpoint
    Evaluate(cli::EvaluateArgs),
    /// Generate a synthetic clustered dataset file
    Synth(cli::SynthArgs),
}

pub mod cli {
    use super::*;

    #[derive(Args)]
    pub struct PrepareArgs {
        /// Raw interaction file (user, item[, timestamp]; tab or comma)
        #[arg(long)]
        pub input: PathBuf,
        /// Output directory for the split files
        #[arg(long)]
        pub out: PathBuf,
        /// Minimum interactions per user and per item
        #[arg(long)]
        pub min_interactions: Option<usize>,
        /// key=value config file (flags win)
        #[arg(long)]
        pub config: Option<PathBuf>,
    }

    #[derive(Args)]
    pub struct TrainArgs {
        /// Prepared split directory
        #[arg(long)]
        pub data: PathBuf,
        /// Output directory (model.ckpt, log.csv, config.txt)
        #[arg(long)]
        pub out: PathBuf,
        /// Embedding dimensionality
        #[arg(long)]
        pub dim: Option<usize>,
        /// bprmf | lightgcn:LAYERS
        #[arg(long)]
        pub backbone: Option<String>,
        #[arg(long)]
        pub lr: Option<f64>,
        #[arg(long)]
        pub weight_decay: Option<f64>,
        #[arg(long)]
        pub batch_size: Option<usize>,
        #[arg(long)]
        pub max_epochs: Option<usize>,
        /// Early-stopping patience in epochs (validation NDCG@20)
        #[arg(long)]
        pub patience: Option<usize>,
        /// Negative samples per positive
        #[arg(long)]
        pub negatives: Option<usize>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// key=value config file (flags win)
        #[arg(long)]
        pub config: Option<PathBuf>,
    }

    #[derive(Args)]
    pub struct DistillArgs {
        #[command(flatten)]
        pub train: TrainArgs,
        /// Frozen teacher checkpoint
        #[arg(long)]
        pub teacher: PathBuf,
        /// identity | linear:ALPHA | quadratic:A,B
        #[arg(long)]
        pub filter: Option<String>,
        /// Weight of the distillation term
        #[arg(long)]
        pub beta: Option<f64>,
        /// knn:K | bipartite
        #[arg(long)]
        pub graph: Option<String>,
        /// batch | full
        #[arg(long)]
        pub loss_scope: Option<String>,
        /// Edge dropout rate, resampled each epoch
        #[arg(long)]
        pub dropout: Option<f64>,
    }

    #[derive(Args)]
    pub struct VerifyArgs {
        /// Node count for the random graphs
        #[arg(long)]
        pub n: Option<usize>,
        /// Number of random instances
        #[arg(long)]
        pub trials: Option<usize>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// key=value config file (flags win)
        #[arg(long)]
        pub config: Option<PathBuf>,
    }

    #[derive(Args)]
    pub struct SpectrumArgs {
        /// Prepared split directory
        #[arg(long)]
        pub data: PathBuf,
        /// Student checkpoint
        #[arg(long)]
        pub student: PathBuf,
        /// Teacher checkpoint
        #[arg(long)]
        pub teacher: PathBuf,
        /// Output directory (spectrum.csv, config.txt)
        #[arg(long)]
        pub out: PathBuf,
        /// knn:K | bipartite
        #[arg(long)]
        pub graph: Option<String>,
        /// key=value config file (flags win)
        #[arg(long)]
        pub config: Option<PathBuf>,
    }

    #[derive(Args)]
    pub struct EvaluateArgs {
        /// Prepared split directory
        #[arg(long)]
        pub data: PathBuf,
        /// Checkpoint to evaluate
        #[arg(long)]
        pub ckpt: PathBuf,
        /// Output directory (metrics.csv, config.txt)
        #[arg(long)]
        pub out: PathBuf,
        /// Comma-separated cutoffs, e.g. 10,20
        #[arg(long)]
        pub ns: Option<String>,
        /// test | validation
        #[arg(long)]
        pub target: Option<String>,
        /// key=value config file (flags win)
        #[arg(long)]
        pub config: Option<PathBuf>,
    }

    #[derive(Args)]
    pub struct SynthArgs {
        /// Output interaction file
        #[arg(long)]
        pub out: PathBuf,
        #[arg(long)]
        pub users: Option<usize>,
        #[arg(long)]
        pub items: Option<usize>,
        #[arg(long)]
        pub per_user: Option<usize>,
        #[arg(long)]
        pub clusters: Option<usize>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// key=value config file (flags win)
        #[arg(long)]
        pub config: Option<PathBuf>,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("FREQD_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => freqd::set_thread_cap(n),
            _ => {
                eprintln!("usage error: FREQD_THREADS must be a positive integer");
                std::process::exit(2);
            }
        }
    }
    let result = match &cli.command {
        Command::Prepare(args) => commands::cmd_prepare(args),
        Command::TrainTeacher(args) => commands::cmd_train(args, "teacher"),
        Command::TrainStudent(args) => commands::cmd_train(args, "student"),
        Command::Distill(args) => commands::cmd_distill(args),
        Command::Verify(args) => commands::cmd_verify(args),
        Command::Spectrum(args) => commands::cmd_spectrum(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
        Command::Synth(args) => commands::cmd_synth(args),
    };
    std::process::exit(match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(CliError::Run(err)) => {
            eprintln!("error: {err:#}");
            1
        }
    });
}
