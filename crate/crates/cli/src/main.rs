//! `amt`: synthesize, analyse, train, transcribe and score from the shell.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use amt_core::AmtError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "amt", version, about = "Desk-scale automatic music transcription workbench")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with [model], [train], [features], [synth] and [recipe] tables.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Spectrogram cache directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print a JSON summary instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a note file (CSV or MIDI) to a WAV.
    Synth(SynthArgs),
    /// Compute a CQT spectrogram of a WAV and write it as CSV.
    Spectrogram(SpectrogramArgs),
    /// Generate a labelled dataset from a random recipe or external labels.
    Generate(GenerateArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training from a checkpoint.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on dataset splits.
    Evaluate(EvaluateArgs),
    /// Transcribe a WAV to a note file.
    Decode(DecodeArgs),
    /// Compare an estimated note file against a reference.
    Score(ScoreArgs),
    /// Experiment plans.
    Plan {
        #[command(subcommand)]
        command: PlanCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlanCommand {
    /// Execute a plan, skipping stages that are up to date.
    Run {
        plan: PathBuf,
        /// Re-run every stage.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Note file: CSV (onset,offset,pitch,velocity) or standard MIDI.
    pub notes: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Built-in timbre name or timbre file.
    #[arg(long, default_value = "piano-like")]
    pub timbre: String,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Uniform white noise amplitude.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Keep raw amplitudes instead of normalizing the peak.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WindowArg {
    Hann,
    Rectangular,
}

#[derive(Debug, Args)]
pub struct SpectrogramArgs {
    pub audio: PathBuf,
    /// CSV output, one row per frame.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub f_min: Option<f64>,
    #[arg(long)]
    pub bins_per_octave: Option<u32>,
    #[arg(long)]
    pub n_bins: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long, value_enum)]
    pub window: Option<WindowArg>,
    /// Compression strength of ln(1 + γ·x); 0 writes raw magnitudes.
    #[arg(long)]
    pub log_gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value = "piano-like")]
    pub timbre: String,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub n_tracks: Option<usize>,
    /// Take labels from this directory instead of a recipe.
    #[arg(long)]
    pub labels_dir: Option<PathBuf>,
    /// Externally rendered WAVs matched to the labels by file name.
    #[arg(long, requires = "labels_dir")]
    pub audio_dir: Option<PathBuf>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    /// Dataset directory or manifest. Repeat to train on a union.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    /// Directory for checkpoints and reports.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: TrainingFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    MeanOfTracks,
    Pooled,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "mean-of-tracks")]
    pub aggregation: AggregationArg,
    /// Also write results.csv and results.txt here.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub audio: PathBuf,
    /// Note file to write; `.mid` writes MIDI, anything else CSV.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub min_duration: Option<usize>,
    #[arg(long)]
    pub gap_tolerance: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    pub reference: PathBuf,
    pub estimate: PathBuf,
    #[arg(long)]
    pub onset_tolerance: Option<f64>,
    #[arg(long)]
    pub offset_ratio: Option<f64>,
    #[arg(long)]
    pub offset_min_tolerance: Option<f64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<AmtError>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
