use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gep::config::RunConfig;
use gep::pipeline::{run_stage, Stage};
use gep::GepError;

/// Desk-scale event pretraining: synthesize, align, pretrain, evaluate.
#[derive(Debug, Parser)]
#[command(name = "gep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes and write event files, images and labels.
    Synth(Common),
    /// Accumulate event files into normalized pseudo-frames.
    Accumulate(Common),
    /// Pretrain the frozen teacher and align the event encoder to it.
    Align(Common),
    /// Pretrain the causal transformer on interleaved token sequences.
    Pretrain(Common),
    /// Generate a sliding-window rollout from a pretrained model.
    Rollout(Common),
    /// Fit and evaluate the linear segmentation decoder.
    EvalSeg(Common),
    /// Fit and evaluate the linear depth decoder.
    EvalDepth(Common),
    /// Clustering indices of initial, aligned and teacher features.
    EvalCluster(Common),
    /// Compare analytic and numeric gradients of every loss.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML config; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

impl Command {
    fn split(&self) -> (Stage, &Common) {
        match self {
            Command::Synth(c) => (Stage::Synth, c),
            Command::Accumulate(c) => (Stage::Accumulate, c),
            Command::Align(c) => (Stage::Align, c),
            Command::Pretrain(c) => (Stage::Pretrain, c),
            Command::Rollout(c) => (Stage::Rollout, c),
            Command::EvalSeg(c) => (Stage::EvalSeg, c),
            Command::EvalDepth(c) => (Stage::EvalDepth, c),
            Command::EvalCluster(c) => (Stage::EvalCluster, c),
            Command::Gradcheck(c) => (Stage::Gradcheck, c),
        }
    }
}

fn run(cli: &Cli) -> Result<String, GepError> {
    let (stage, common) = cli.command.split();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let report = run_stage(&cfg, stage, &common.out)?;
    Ok(report.to_kv())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
