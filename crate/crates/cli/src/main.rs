//! `tiue` — train, distill, sample, analyze, evaluate, and benchmark
//! the shared-encoder diffusion lab from the command line.
//!
//! Exit codes: 2 for configuration/schema errors, 3 for checkpoint
//! errors, 1 for runtime failures. Diagnostics go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tiue_cli::checkpoint::CkptError;
use tiue_cli::config::ConfigError;

mod commands;

#[derive(Parser)]
#[command(name = "tiue", version, about = "shared-encoder one-pass diffusion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the epsilon-prediction teacher on the toy dataset.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a one-pass student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Feature-similarity traces and quality-versus-steps curves.
    Analyze(AnalyzeArgs),
    /// Score a generated image directory against a real one.
    Eval(EvalArgs),
    /// Wall-clock comparison of the sampling modes.
    Bench(BenchArgs),
    /// Export the procedural dataset as PPM files plus a JSON manifest.
    ExportData(ExportDataArgs),
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// JSON run configuration (the `distill` section drives the loop).
    #[arg(long)]
    config: PathBuf,
    /// Output student checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV progress log (iteration, vsd, kl, lora, eps stats).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Model checkpoint; the EMA weights are served.
    #[arg(long)]
    model: PathBuf,
    /// ddim | loopfree-seq | loopfree-par
    #[arg(long, default_value = "loopfree-par")]
    mode: String,
    /// DDIM step count (ddim mode).
    #[arg(long)]
    steps: Option<usize>,
    /// Decoder pass count (loop-free modes); defaults to the
    /// checkpoint's stored plan, else 4.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Worker threads for loopfree-par (TIUE_THREADS overrides the
    /// default).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for PPM files.
    #[arg(long)]
    out: PathBuf,
    /// Fixed condition `shape.color` (e.g. `1.2`); default cycles all
    /// classes.
    #[arg(long)]
    cond: Option<String>,
    /// Condition interpolation `C1,C2,N` with `C = shape.color`; draws
    /// N images along the path with a shared input noise.
    #[arg(long)]
    interp: Option<String>,
    /// Filename prefix.
    #[arg(long, default_value = "sample")]
    run_id: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Trace mode: DDIM step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Trace mode: number of probe seeds.
    #[arg(long, default_value_t = 16)]
    probes: usize,
    /// Quality mode: comma-separated step counts (e.g. `2,4,8,16,50`).
    #[arg(long)]
    quality_steps: Option<String>,
    /// Quality mode: directory of real PPM images.
    #[arg(long)]
    real: Option<PathBuf>,
    /// Quality mode: samples per step count.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace condition `shape.color`.
    #[arg(long, default_value = "0.0")]
    cond: String,
    /// Output CSV path (trace metadata lands next to it as
    /// `<out>.meta.json`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of real PPM images.
    #[arg(long)]
    real: PathBuf,
    /// Directory of generated PPM images.
    #[arg(long)]
    fake: PathBuf,
    /// `pixels` or `teacher:CKPT` (pooled mid-block features).
    #[arg(long, default_value = "pixels")]
    embedding: String,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Comma-separated thread counts for loopfree-par.
    #[arg(long, default_value = "1,2,4,8")]
    threads: String,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Timed repetitions per row (median is reported).
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportDataArgs {
    /// JSON run configuration (`toy` and `dataset` sections apply).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured dataset size.
    #[arg(long)]
    count: Option<usize>,
    /// Override the configured dataset seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<CkptError>() {
            return 3;
        }
        if cause.is::<clap::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher(a) => commands::train_teacher(a),
        Command::Distill(a) => commands::distill(a),
        Command::Sample(a) => commands::sample(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::ExportData(a) => commands::export_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
