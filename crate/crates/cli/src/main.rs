//! `tsm`: stretch audio, train models, evaluate and benchmark.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | bad arguments, unsupported compression ratio, missing `--ckpt` |
//! | 3 | I/O failure, unreadable audio, empty dataset |
//! | 4 | model or sample-rate mismatch, inconsistent checkpoint |
//! | 5 | non-finite training loss (a last-good checkpoint is written) |

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsmnet::Error;

#[derive(Parser, Debug)]
#[command(name = "tsm", version, about = "Neural and classical time-scale modification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Change the duration of a WAV file without changing its pitch.
    Stretch(StretchArgs),
    /// Train an autoencoder on a directory of WAV files.
    Train(TrainArgs),
    /// Score methods on a corpus: duration, pitch and reconstruction errors.
    Eval(EvalArgs),
    /// Like `eval`, with timings taken as the median of repeated runs.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct StretchArgs {
    /// Input WAV file.
    pub input: PathBuf,
    /// Speed factor: output duration is input duration divided by it.
    #[arg(long)]
    pub speed: f64,
    /// neural, wsola, pv, ola or resample.
    #[arg(long, default_value = "wsola")]
    pub method: String,
    /// Checkpoint for the neural method.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output path; defaults to `<input stem>.<method>.<speed>.wav` next to the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resample input to the model rate instead of failing on a mismatch.
    #[arg(long)]
    pub auto_resample: bool,
    /// Chunk length in samples for long inputs.
    #[arg(long)]
    pub chunk_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of WAV files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Compression ratio preset: 256, 512 or 1024.
    #[arg(long)]
    pub cr: Option<usize>,
    /// Steps to run in this invocation.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Directory receiving checkpoints and metrics.jsonl.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Continue from a checkpoint; step numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Re-initialize the discriminator when resuming.
    #[arg(long)]
    pub fresh_discriminator: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON training configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub segment_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of WAV files; the built-in synthetic corpus when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long, default_value = "wsola,pv,neural")]
    pub methods: String,
    /// `grid` for the 20-speed evaluation grid, or a comma-separated list.
    #[arg(long, default_value = "grid")]
    pub speeds: String,
    /// Checkpoints for the neural method, one per model; repeatable.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Per-row CSV report.
    #[arg(long)]
    pub report: PathBuf,
    /// Aggregate JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Directory for gnuplot data files.
    #[arg(long)]
    pub gnuplot: Option<PathBuf>,
    /// Length in seconds of each synthetic clip.
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    /// Seed for the synthetic corpus.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Timed repetitions per row (at least 5).
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::TooShort { .. } | Error::Silent => 2,
            Error::Io { .. }
            | Error::Wav(_)
            | Error::UnsupportedFormat(_)
            | Error::EmptyAudio
            | Error::EmptyDataset(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::SampleRateMismatch { .. } | Error::ShapeMismatch(_) | Error::Checkpoint(_) => 4,
            Error::NonFiniteLoss { .. } => 5,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stretch(a) => commands::stretch(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a, None),
        Command::Bench(a) => commands::eval(a.eval, Some(a.repetitions)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
