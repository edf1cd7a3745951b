//! `lret`: synthetic data generation, training, database build, querying and
//! benchmarking for case-level slide retrieval.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lret_core::dml::RelevanceKind;
use lret_core::ScaleSet;

#[derive(Parser, Debug)]
#[command(name = "lret", version, about = "Case-based similar-image retrieval with attention MIL and contrastive metric learning")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding every artifact and the manifest.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Magnifications: h, l or hl.
    #[arg(long, global = true)]
    pub scale: Option<ScaleSet>,
    /// Pair relevance used for metric learning: staining or subtype.
    #[arg(long, global = true)]
    pub relevance: Option<RelevanceKind>,
    /// Number of retrieved cases.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Monte Carlo draws for significance tests.
    #[arg(long, global = true)]
    pub draws: Option<usize>,
    /// Restrict train/build-db to the training and validation cases of this
    /// cross-validation fold.
    #[arg(long, global = true)]
    pub fold: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset into <run-dir>/dataset.
    GenData,
    /// Alternate MIL and DML training per magnification.
    Train {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
        /// Stop once this many outer rounds have completed.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Build the search database from trained checkpoints.
    BuildDb,
    /// Retrieve similar cases for one case and export the explanation.
    Query {
        /// Case id of the query.
        #[arg(long)]
        case: String,
    },
    /// Cross-validated benchmark of retrieval methods.
    Evaluate {
        /// Comma-separated methods (random-features, subtype-all,
        /// staining-all, subtype-ha, staining-ha).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<lret_core::eval::Method>>,
    },
    /// Render the benchmark table and optionally database heatmaps.
    Report {
        /// Also write every database case's heatmap grid.
        #[arg(long)]
        heatmaps: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
