mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mciprog::train::Ablation;

/// Two-phase MCI progression pipeline: synthetic cohort, feature
/// extractor, sequence predictor, evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "mciprog", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Global {
    /// Pipeline configuration (TOML). Missing sections take desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding all artifacts and manifests.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Worker threads, for folds and per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Full-size models and schedules; replaces the model and training
    /// sections of the configuration.
    #[arg(long, global = true)]
    pub paper_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the longitudinal cohort and the diagnostic image set.
    Synth,
    /// Train the image feature extractor on the diagnostic set.
    TrainExtractor,
    /// Rebalance the cohort with rotated copies and extract visit features.
    Extract,
    /// Cross-validate the sequence predictor.
    TrainPredictor,
    /// Re-evaluate the saved fold models and reprint their metrics.
    Evaluate,
    /// Compare the predictor against its ablated variants.
    Ablate {
        /// Comma-separated subset of no_biomarkers, vanilla_lstm, bce_loss.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Ablation>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.global.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::FAILURE;
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.jobs).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Synth => commands::synth(&cli.global),
        Command::TrainExtractor => commands::train_extractor(&cli.global),
        Command::Extract => commands::extract(&cli.global),
        Command::TrainPredictor => commands::train_predictor(&cli.global),
        Command::Evaluate => commands::evaluate(&cli.global),
        Command::Ablate { modes } => commands::ablate(&cli.global, &modes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
