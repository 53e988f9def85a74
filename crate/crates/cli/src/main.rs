//! `fan`: synthesize data, train, evaluate, annotate, ablate, report and
//! gradient-check.

mod commands;
mod gradcheck;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fan_core::CoreError;
use fan_tensor::TensorError;

#[derive(Debug, Parser)]
#[command(name = "fan", version, about = "Face alignment networks on synthetic data")]
pub struct Cli {
    /// Seed for data generation, initialization, shuffling and box noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model and training configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for batch-parallel math (1 runs serially).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Annotate images with 3D landmarks using a 2D and a guided network.
    Annotate(AnnotateArgs),
    /// Produce an ablation table.
    Ablate(AblateArgs),
    /// Summarize per-sample error files.
    Report(ReportArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 68)]
    pub landmarks: usize,
    #[arg(long, default_value_t = -90.0, allow_hyphen_values = true)]
    pub yaw_min: f64,
    #[arg(long, default_value_t = 90.0, allow_hyphen_values = true)]
    pub yaw_max: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// fan2d, fan3d, guided or depth; taken from the checkpoint when resuming.
    #[arg(long)]
    pub kind: Option<String>,
    /// Training manifest; the last tenth is held out for validation.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue a run from its checkpoint.
    #[arg(long, conflicts_with = "finetune")]
    pub resume: Option<PathBuf>,
    /// Start from a checkpoint and train at its final learning rate.
    #[arg(long, requires = "finetune_epochs")]
    pub finetune: Option<PathBuf>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Feed all-zero guide channels to a guided network.
    #[arg(long)]
    pub zero_guides: bool,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "passthrough")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Use each sample's own landmarks as the prediction.
    #[arg(long, hide = true, conflicts_with = "ckpt")]
    pub passthrough: bool,
    /// Write the cumulative error curve here.
    #[arg(long)]
    pub ced: Option<PathBuf>,
    #[arg(long, default_value_t = fan_core::metrics::AUC_THRESHOLD)]
    pub auc_threshold: f64,
    /// Box noise level in [0, 1).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Downscale faces to this size before inference.
    #[arg(long)]
    pub face_px: Option<f64>,
    /// Write per-sample errors here.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
    #[arg(long)]
    pub zero_guides: bool,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub ckpt_2d: PathBuf,
    #[arg(long)]
    pub ckpt_guided: PathBuf,
    #[arg(long)]
    pub ckpt_depth: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Yaw,
    Noise,
    Resolution,
    Size,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub protocol: ProtocolArg,
    /// Model to evaluate; not used by the size protocol.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Evaluation manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Training manifest for the size protocol.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Override the configured epoch count for the size protocol.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Evaluate on this many samples per yaw bin.
    #[arg(long)]
    pub per_bin: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Per-sample files written by `eval --per-sample`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = fan_core::metrics::AUC_THRESHOLD)]
    pub auc_threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    /// Add an op with a wrong backward rule.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// A check that ran and failed on numbers rather than input.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return if e.is_numerical() { 2 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return match e {
                TensorError::NonFinite { .. } | TensorError::Diverged(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<NumericalFailure>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
