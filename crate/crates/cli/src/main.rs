//! `skelae`: prepare skeleton datasets, train the autoencoder variants,
//! evaluate learned features and inspect artifacts.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skelae::data::{BodyMode, Precision, SplitKind};
use skelae::evaluation::Distance;
use skelae::training::{Combine, Variant};

use crate::config::Protocol;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] skelae::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: skelae::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::Core(e) | CliError::File { source: e, .. } => e,
        };
        match core {
            skelae::Error::Config(_) => 1,
            skelae::Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skelae", version, about = "Unsupervised skeleton action representations", propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset cache and manifest from NTU files or the synthetic generator.
    Prepare(PrepareArgs),
    /// Train one autoencoder variant on a prepared cache.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one downstream protocol.
    Eval(EvalArgs),
    /// Print a skeleton graph, checkpoint, dataset or feature bank.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory [default: $SKELAE_OUT or ./skelae-out].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Generator options as `key=value`, e.g. `classes=4 per-class=50 seed=7`.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE", conflicts_with = "ntu")]
    synthetic: Option<Vec<String>>,
    /// Directory of `.skeleton` files.
    #[arg(long, value_name = "DIR")]
    ntu: Option<PathBuf>,
    #[arg(long, value_parser = parse_serde::<SplitKind>, value_name = "cross-subject|cross-view|cross-setup")]
    split: Option<SplitKind>,
    #[arg(long, value_parser = parse_serde::<BodyMode>, value_name = "first|all|concat-two")]
    body: Option<BodyMode>,
    /// Frames per NTU sequence after resampling.
    #[arg(long)]
    frames: Option<usize>,
    /// Root-centre and torso-scale NTU sequences.
    #[arg(long, value_enum)]
    normalize: Option<Switch>,
    /// Cache file name under the output directory.
    #[arg(long, value_name = "NAME")]
    cache: Option<String>,
    #[arg(long, value_parser = parse_serde::<Precision>, value_name = "f32|f64")]
    precision: Option<Precision>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset cache [default: <out>/dataset.skds].
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_serde::<Variant>, value_name = "ae|ae-l|grae|grae-l")]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Encoder widths per block, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "C1,C2,C3")]
    channels: Option<Vec<usize>>,
    /// Built-in topology (ntu25, stick9, chain<m>) or bone-list file.
    #[arg(long, value_name = "NAME|FILE")]
    graph: Option<String>,
    #[arg(long, value_enum)]
    laplacian: Option<Switch>,
    #[arg(long, value_enum)]
    ssvi: Option<Switch>,
    #[arg(long)]
    grl_lambda: Option<f64>,
    #[arg(long)]
    ssvi_hidden: Option<usize>,
    #[arg(long, value_parser = parse_serde::<Combine>, value_name = "sequential|weighted-sum")]
    combine: Option<Combine>,
    /// Laplacian weight in weighted-sum mode.
    #[arg(long)]
    mu: Option<f64>,
    /// Steps between checkpoints; the final step always saves.
    #[arg(long, value_name = "STEPS")]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint using its stored configuration.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Trained model [default: <out>/checkpoint.ckpt].
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    protocol: Option<Protocol>,
    /// 1-NN metric.
    #[arg(long, value_parser = parse_serde::<Distance>, value_name = "euclidean|cosine")]
    distance: Option<Distance>,
    /// Score a randomly rotated copy of the test set.
    #[arg(long)]
    rotated_test: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long, value_name = "NAME|FILE")]
    graph: Option<String>,
    /// Joint count for a bone-list file whose highest joint has no bone.
    #[arg(long, requires = "graph")]
    joints: Option<usize>,
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    dataset: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    bank: Option<PathBuf>,
}

/// Parses a kebab-case enum through its serde names, so flags and config
/// files accept the same spellings.
fn parse_serde<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s)).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
