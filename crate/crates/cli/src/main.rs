//! `instret`: dataset synthesis, encoder training, library building,
//! querying and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "instret", version, about = "Instrument retrieval from mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed copied into every section of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Training defaults to one.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Train the single or the multi encoder.
    Train(TrainArgs),
    /// Embed library clips with a single encoder.
    Library(LibraryArgs),
    /// Retrieve the instruments of one mixture.
    Query(QueryArgs),
    /// Run an evaluation protocol.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub instruments: Option<usize>,
    #[arg(long)]
    pub per_instrument: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MixMode {
    /// Fresh mixtures from the training singles every epoch.
    Random,
    /// The manifest's pre-rendered training mixtures.
    Manifest,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, metrics and provenance.
    #[arg(long)]
    pub out: PathBuf,
    /// Frozen single-encoder checkpoint (multi stage).
    #[arg(long)]
    pub single: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    pub mix: MixMode,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct LibraryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub single: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Library file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub multi: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub mixture: PathBuf,
    /// Candidates listed per output slot.
    #[arg(long, default_value_t = 1)]
    pub top: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Eer,
    Retrieval,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the metric report.
    #[arg(long)]
    pub out: PathBuf,
    /// Single-encoder checkpoint (eer).
    #[arg(long)]
    pub single: Option<PathBuf>,
    /// Multi-encoder checkpoint (retrieval).
    #[arg(long)]
    pub multi: Option<PathBuf>,
    /// Library file (retrieval).
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Also dump the evaluated embeddings for plotting.
    #[arg(long)]
    pub dump_embeddings: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs.
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(anyhow::anyhow!(msg.into()))
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        })*
    };
}

runtime_from!(
    anyhow::Error,
    std::io::Error,
    serde_json::Error,
    instret::synth::SynthError,
    instret::encoder::EncoderError,
    instret::retrieval::RetrievalError,
    instret::eval::EvalError
);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Library(a) => commands::library(a),
        Command::Query(a) => commands::query(a),
        Command::Eval(a) => commands::eval(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
