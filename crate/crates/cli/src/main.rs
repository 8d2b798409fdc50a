//! `assl`: synthetic data generation, training, evaluation, ablations and
//! embedding export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "assl", version, about = "Semi-supervised skeleton action recognition with adversarial self-supervision")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file; see the key list below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed (training seed; corpus seed for gen-data).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for run artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Training strategy, e.g. assl, supervised_only, vat.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Fraction of each class's training samples that keep their label.
    #[arg(long, global = true)]
    pub labels_fraction: Option<f64>,
    /// Write per-epoch neighbour CSV dumps into the output directory.
    #[arg(long, global = true)]
    pub dump_neighbors: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic skeleton corpus.
    GenData(GenDataArgs),
    /// Train one model and write metrics, checkpoint and summary.
    Train(DataArgs),
    /// Evaluate a checkpoint on the test set.
    Eval(EvalArgs),
    /// Run the ablation grid and the neighbourhood-size sweep.
    Ablate(AblateArgs),
    /// Export translated features of every sample as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Largest rotation about the vertical axis, in degrees (0 to 180).
    #[arg(long)]
    pub max_rotation: Option<f64>,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Training corpus (JSON lines); overrides the config's `data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test corpus; overrides the config's `test_data`.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Number of seeds per variant (seed, seed+1, ...).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated neighbourhood sizes for the K sweep.
    #[arg(long, value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    /// Seeds per K in the sweep.
    #[arg(long)]
    pub k_seeds: Option<usize>,
    /// Skip the K sweep.
    #[arg(long)]
    pub no_k_sweep: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

fn main() -> ExitCode {
    let command = Cli::command().after_long_help(config::config_help()).after_help(config::config_help());
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
