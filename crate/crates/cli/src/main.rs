mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpdg::eval::Smoothing;
use fpdg::Error;

#[derive(Parser)]
#[command(name = "fpdg", version, about = "Entity-label-guided product description generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus with its vocabulary and manifest.
    GenData(GenDataArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Train several variants with a shared seed and budget.
    Ablate(AblateArgs),
    /// Decode descriptions for a corpus with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score a generations file.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Schema JSON; the built-in schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Default)]
pub struct TrainOverrides {
    /// JSON file of training settings; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: `desk` (default) or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_final: Option<f64>,
    #[arg(long)]
    pub lambda_warmup: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
pub struct DataPaths {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to `schema.json` beside the corpus, else the built-in schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Defaults to `vocab.tsv` beside the corpus, else built from the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataPaths,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Model variant: full, no_mem, no_elstm or no_elstm+no_mem.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataPaths,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, value_delimiter = ',', default_value = "full,no_mem,no_elstm")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to `schema.json` beside the checkpoint.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Defaults to `vocab.tsv` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Beam width; 0 decodes greedily.
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 15)]
    pub min_len: usize,
    #[arg(long, default_value_t = 70)]
    pub max_len: usize,
    /// Decode only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also write per-step decoder diagnostics to trace.jsonl.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generations: PathBuf,
    /// Corpus the generation ids refer to.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to `schema.json` beside the corpus, else the built-in schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Adds teacher-forced entity-label recall for this model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary for `--checkpoint`; defaults to `vocab.tsv` beside it.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub recall_k: Vec<usize>,
    #[arg(long, value_enum, default_value = "epsilon")]
    pub smoothing: SmoothingArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SmoothingArg {
    Epsilon,
    Raw,
}

impl From<SmoothingArg> for Smoothing {
    fn from(s: SmoothingArg) -> Self {
        match s {
            SmoothingArg::Epsilon => Smoothing::Epsilon,
            SmoothingArg::Raw => Smoothing::Raw,
        }
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Hidden width of the checked components.
    #[arg(long, default_value_t = 4)]
    pub dims: usize,
    #[arg(long, default_value_t = 12)]
    pub vocab: usize,
    #[arg(long, default_value_t = 5)]
    pub keywords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes the per-component report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true, value_enum)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FaultArg {
    SigmoidSignFlip,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

fn code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_)
        | Error::Schema(_)
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::VocabMismatch(_)
        | Error::Json(_) => 2,
        Error::Sample { source, .. } => code_for(source),
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}
