//! `dvae`: feature extraction, training, conversion, evaluation and
//! speaker-embedding export.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 failure
//! while running.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dvae_core::Error> for CliError {
    fn from(e: dvae_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dvae", version, about = "Many-to-many voice conversion with a speaker/content disentangling VAE")]
pub struct Cli {
    /// Seed for every random choice (model init, pair sampling, noise);
    /// overrides train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute normalized log-mel features for a corpus of
    /// `<speaker>/<utterance>.wav` files.
    Features(FeaturesArgs),
    /// Train from a feature manifest, writing checkpoints and loss.csv.
    Train(TrainArgs),
    /// Convert a source utterance to the voice of reference utterances.
    Convert(ConvertArgs),
    /// Mel-cepstral distortion between reference and converted WAV pairs.
    Eval(EvalArgs),
    /// Per-utterance speaker embeddings for every speaker in a feature
    /// directory.
    Embed(EmbedArgs),
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Corpus root with one directory of WAV files per speaker.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for features, stats.dvs and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON configuration (sections dsp, model, train, paths).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Speaker split file; overrides paths.split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Skip unreadable files instead of stopping at the first one.
    #[arg(long)]
    pub continue_on_error: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// manifest.json written by `features`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON configuration (sections dsp, model, train, paths).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for checkpoints and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its model settings are used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use the reduced-width model for quick experiments; replaces the
    /// model section.
    #[arg(long)]
    pub toy: bool,
    /// Overrides train.total_steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides train.lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides train.beta.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Overrides train.checkpoint_every.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Overrides train.precision.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Overrides train.log_every (0 disables progress lines).
    #[arg(long)]
    pub log_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Utterance whose content is kept.
    #[arg(long)]
    pub source: PathBuf,
    /// One or more utterances of the target speaker.
    #[arg(long, required = true, num_args = 1..)]
    pub target_ref: Vec<PathBuf>,
    /// Output WAV; the converted normalized log-mel is written next to it
    /// with extension .dvf.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON configuration (sections dsp, model, train, paths).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// stats.dvs written by `features`; overrides paths.stats.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// CSV of `reference,converted` WAV paths, relative to the CSV.
    #[arg(long)]
    pub pairs: PathBuf,
    /// JSON configuration (sections dsp, model, train, paths).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report CSV: one row per pair, then MEAN and STD.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Feature directory written by `features`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output CSV `speaker_id,utterance_id,e1..eK`.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
