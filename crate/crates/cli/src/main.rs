//! `morphseg` command line: phantoms, classical ACWE, unsupervised training,
//! fine-tuning, sliding-window segmentation, evaluation and gradient checks.

mod commands;
mod overlay;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "morphseg", version, about = "Morphological active-contour segmentation of 3D volumes")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "MORPHSEG_THREADS")]
    threads: Option<usize>,
    /// Run on a single worker thread. Reductions use a fixed order in every
    /// mode, so this only removes scheduling variation in timing.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic tube phantom and its ground truth.
    Phantom(PhantomArgs),
    /// Run the classical morphological ACWE solver.
    Acwe(AcweArgs),
    /// Train a network without labels.
    Train(TrainArgs),
    /// Continue training a checkpoint on unlabeled target volumes.
    Finetune(FinetuneArgs),
    /// Segment a volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom specification (JSON); missing fields take their defaults.
    #[arg(long)]
    spec: Option<std::path::PathBuf>,
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long)]
    gt: std::path::PathBuf,
    /// Overrides the seed of the specification.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Mean,
    Checkerboard,
}

#[derive(Args, Debug)]
struct AcweArgs {
    #[arg(long = "in")]
    input: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    mu: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = Init::Mean)]
    init: Init,
    /// Block side of the checkerboard initialisation.
    #[arg(long, default_value_t = 5)]
    period: usize,
    /// Per-iteration CSV log.
    #[arg(long)]
    log: Option<std::path::PathBuf>,
}

/// Intensity normalization applied before the network sees a volume.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Normalize {
    /// Each volume with its own statistics.
    Volume,
    /// Statistics pooled over the training set, stored with the checkpoint.
    Dataset,
    /// Volumes are used as stored.
    None,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training volumes (`*.nrrd`).
    #[arg(long)]
    data: std::path::PathBuf,
    /// Training configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, value_enum, default_value_t = Normalize::Volume)]
    normalize: Normalize,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("budget").required(true))]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
    #[arg(long, group = "budget")]
    budget_steps: Option<usize>,
    #[arg(long, group = "budget")]
    budget_seconds: Option<f64>,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Replaces the configuration stored with the checkpoint.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value_t = Normalize::Volume)]
    normalize: Normalize,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    #[arg(long = "in")]
    input: std::path::PathBuf,
    /// Per-voxel foreground probability.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Thresholded mask.
    #[arg(long)]
    mask: Option<std::path::PathBuf>,
    #[arg(long, value_parser = parse_triple, default_value = "32,128,128")]
    window: [usize; 3],
    #[arg(long, value_parser = parse_triple, default_value = "8,16,16")]
    stride: [usize; 3],
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Writes one PNG per z-slice with the mask contour over the input.
    #[arg(long)]
    overlay_dir: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value_t = Normalize::Volume)]
    normalize: Normalize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Probability volume.
    #[arg(long)]
    pred: std::path::PathBuf,
    #[arg(long)]
    gt: std::path::PathBuf,
    /// Report path; `.csv` writes the one-row table, anything else JSON.
    #[arg(long)]
    report: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GradScope {
    Op,
    Layer,
    End2end,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradScope::Op)]
    scope: GradScope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated integers, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a nonnegative integer"))?;
    }
    Ok(out)
}

/// Machine-readable code of the first library error in the chain.
fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<morphseg::error::Error>().map(|m| m.code()))
        .or_else(|| e.downcast_ref::<commands::CliError>().map(|c| c.code()))
        .unwrap_or("error")
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn setup_threads(cli: &Cli) -> anyhow::Result<()> {
    let n = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = n {
        if n == 0 {
            return Err(morphseg::error::Error::InvalidArgument("--threads must be ≥ 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("usage: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let result = setup_threads(&cli).and_then(|()| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Acwe(a) => commands::acwe(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Segment(a) => commands::segment(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their cause in their message.
            let msg = if e.is::<morphseg::error::Error>() { format!("{e}") } else { format!("{e:#}") };
            eprintln!("{}: {}", error_code(&e), one_line(&msg));
            ExitCode::FAILURE
        }
    }
}
