mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qfae::evaluation::ProfileName;

/// Reconstruction-based anomaly detection with frozen vision transformers.
#[derive(Debug, Parser)]
#[command(name = "qfae", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed; for training, runs this seed only.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (defaults to the configured one).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop CT slices to their nonzero region, centre them on a black canvas
    /// and apply the bilateral filter.
    PreprocessLiver {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 224)]
        side: usize,
        #[arg(long)]
        no_bilateral: bool,
    },
    /// Train one model per seed on `<data>/train/good`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a labelled test set with one or more checkpoints.
    Evaluate {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        profile: Option<ProfileName>,
        /// Also write pixel anomaly maps.
        #[arg(long)]
        maps: bool,
    },
    /// Score a single image and write its anomaly map.
    Score {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        profile: Option<ProfileName>,
    },
    /// Write pixel anomaly maps for every test image.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        profile: Option<ProfileName>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck,
    /// Train and evaluate toy models on a generated texture corpus.
    SyntheticBench {
        /// Number of seeds from the configured list to run.
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Keep the generated corpus under `<out>/corpus`.
        #[arg(long)]
        write_corpus: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if e.is_validation() { 3 } else { 1 })
        }
    }
}
