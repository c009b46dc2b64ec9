//! `mufm`: prepare, embed, match and evaluate masked/unmasked face pairs.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mufm_core::embedding_file::FileFormat;
use mufm_core::extractor::{InputLayout, OutputKind};

#[derive(Debug, Parser)]
#[command(name = "mufm", version, about = "Masked/unmasked face matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a raw image tree into the prepared PNG layout with a manifest.
    PrepareDataset(PrepareArgs),
    /// Write randomly transformed copies of every image in a prepared dataset.
    Augment(AugmentArgs),
    /// Produce an embedding file from a model or from precomputed vectors.
    Extract(ExtractArgs),
    /// Split an embedding file into an unmasked gallery and masked probes.
    Index(IndexArgs),
    /// Match masked probes against the unmasked gallery.
    Match(MatchArgs),
    /// Pick the accuracy-maximizing similarity threshold.
    Calibrate(CalibrateArgs),
    /// Score match results against ground truth and write reports.
    Evaluate(EvaluateArgs),
    /// Run the HTTP verification service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw tree with with_mask/ and without_mask/ folders.
    #[arg(long)]
    pub src: PathBuf,
    /// Output directory for the prepared dataset.
    #[arg(long)]
    pub dst: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Prepared dataset to read.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; receives the originals plus the copies.
    #[arg(long)]
    pub dst: PathBuf,
    /// Transformed copies per image.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    /// Seed for all random draws.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Hwc,
    Chw,
}

impl From<LayoutArg> for InputLayout {
    fn from(v: LayoutArg) -> Self {
        match v {
            LayoutArg::Hwc => InputLayout::Hwc,
            LayoutArg::Chw => InputLayout::Chw,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputKindArg {
    FeatureMap,
    Vector,
}

impl From<OutputKindArg> for OutputKind {
    fn from(v: OutputKindArg) -> Self {
        match v {
            OutputKindArg::FeatureMap => OutputKind::FeatureMap,
            OutputKindArg::Vector => OutputKind::Vector,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Input tensor layout of the model.
    #[arg(long, value_enum, default_value = "hwc")]
    pub layout: LayoutArg,
    /// Whether the model emits a feature map (pooled here) or a vector.
    #[arg(long, value_enum, default_value = "feature-map")]
    pub output_kind: OutputKindArg,
    /// Embedding dimension the model must produce.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Prepared dataset; without it --precomputed is copied through.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ONNX backbone.
    #[arg(long, conflicts_with = "precomputed")]
    pub model: Option<PathBuf>,
    /// Embedding file keyed by record id.
    #[arg(long)]
    pub precomputed: Option<PathBuf>,
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// Convert to grayscale before embedding.
    #[arg(long)]
    pub grayscale: bool,
    /// Gaussian denoise std-dev in pixels (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub denoise_sigma: f64,
    /// Output embedding file.
    #[arg(long)]
    pub out: PathBuf,
    /// Output format: binary or jsonl.
    #[arg(long, default_value = "binary")]
    pub format: FileFormat,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Embedding file with both masked and unmasked rows.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output file for the unmasked gallery rows.
    #[arg(long)]
    pub gallery_out: PathBuf,
    /// Output file for the masked probe rows.
    #[arg(long)]
    pub probes_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Unmasked gallery embeddings.
    #[arg(long, requires = "probes", conflicts_with = "embeddings")]
    pub gallery: Option<PathBuf>,
    /// Masked probe embeddings.
    #[arg(long, requires = "gallery")]
    pub probes: Option<PathBuf>,
    /// A single embedding file split by mask status.
    #[arg(long, required_unless_present = "gallery")]
    pub embeddings: Option<PathBuf>,
    /// Shortlist size.
    #[arg(long, default_value_t = mufm_core::matcher::DEFAULT_SHORTLIST_K)]
    pub k: usize,
    /// Acceptance threshold on cosine similarity, in [-1, 1].
    #[arg(long, default_value_t = mufm_core::matcher::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Output directory for matches.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the gallery-unmasked / probe-masked checks.
    #[arg(long)]
    pub no_mask_check: bool,
    /// Write a side-by-side montage per probe; needs --data.
    #[arg(long, requires = "data")]
    pub render: bool,
    /// Prepared dataset holding the images for --render.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Unmasked gallery embeddings.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Masked probe embeddings.
    #[arg(long)]
    pub probes: PathBuf,
    /// Write the calibration as JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// matches.jsonl from the match subcommand.
    #[arg(long)]
    pub matches: PathBuf,
    /// CSV with probe_id,subject.
    #[arg(long)]
    pub truth: PathBuf,
    /// Training curve CSV (epoch,train_loss,train_acc,val_loss,val_acc).
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Output directory for the reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port to bind; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Gallery store file; created when missing.
    #[arg(long)]
    pub store: PathBuf,
    /// ONNX backbone enabling image request bodies.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// Default acceptance threshold.
    #[arg(long, default_value_t = mufm_core::matcher::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Default shortlist size.
    #[arg(long, default_value_t = mufm_core::matcher::DEFAULT_SHORTLIST_K)]
    pub k: usize,
}

/// Exit status contract: 1 usage, 2 data, 3 internal.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Internal(e) => e,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUFM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::PrepareDataset(a) => commands::prepare_dataset(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Index(a) => commands::index(&a),
        Command::Match(a) => commands::match_cmd(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Serve(a) => commands::serve(&a),
    };
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
