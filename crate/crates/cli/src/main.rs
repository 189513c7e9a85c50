//! `faceswap` command line.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faceswap::config::Scale;

#[derive(Parser, Debug)]
#[command(name = "faceswap", version, about = "Face swapping: alignment, calibration, training, swapping and evaluation")]
pub struct Cli {
    /// Run in 64-bit floating point instead of 32-bit.
    #[arg(long, global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Align a directory of images to the five-point template.
    Align(AlignArgs),
    /// Render a synthetic face dataset.
    Synth(SynthArgs),
    /// Measure per-block feature distances of a swap model and write margins.
    CalibrateIfsr(CalibrateArgs),
    /// Train a generator and critic.
    Train(TrainArgs),
    /// Swap the identity of one source image onto one target image.
    Swap(SwapArgs),
    /// Compute identity, pose, expression and FID metrics.
    Evaluate(EvaluateArgs),
    /// Export loss curves, attention grids or calibration figures.
    Plot(PlotArgs),
    /// Inspect model presets and run configurations.
    #[command(subcommand)]
    Config(ConfigCommand),
    /// Print version and file format versions.
    Version,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Input root: images directly inside or in one subdirectory per identity.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    /// Template file (`size N` line plus five `x y` lines); default is the 112-pixel recognizer template.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub identities: usize,
    #[arg(long, default_value_t = 20)]
    pub per_identity: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = faceswap::config::DEFAULT_SEED)]
    pub seed: u64,
    /// Write uncropped canvases with landmark sidecars instead of aligned crops.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// `target` or `source` pass-through, or a training checkpoint.
    #[arg(long)]
    pub swap_model: String,
    #[arg(long, default_value = "stub")]
    pub backbone: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of (target, source, impostor) triplets.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Margins table to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON; defaults to the margins path with a `.report.json` suffix.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Face resolution for pass-through models; checkpoints use their own.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub first: Option<usize>,
    #[arg(long)]
    pub last: Option<usize>,
    #[arg(long, default_value_t = faceswap::config::DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct RunConfigArgs {
    /// Preset name or configuration file.
    #[arg(long, default_value = faceswap::config::DEFAULT_PRESET)]
    pub config: String,
    /// Scale used when `--config` names a preset.
    #[arg(long, value_enum, default_value = "desk")]
    pub scale: ScaleArg,
    /// Override a configuration key, e.g. `--set loss.identity=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Margins table from `calibrate-ifsr`; required by variants with IFSR.
    #[arg(long)]
    pub margins: Option<PathBuf>,
    /// Total number of steps, counting steps already in a resumed checkpoint.
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `OUT/checkpoint.safetensors` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct SwapArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Identity encoder; must be the one the checkpoint was trained with.
    #[arg(long, default_value = "stub")]
    pub backbone: String,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Swapped faces in one subdirectory per true source identity.
    #[arg(long)]
    pub swapped: PathBuf,
    /// Unaltered targets at the same relative paths as the swapped faces.
    #[arg(long)]
    pub reference: PathBuf,
    /// One subdirectory per identity; identity retrieval is skipped without it.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Secondary identity encoder for retrieval.
    #[arg(long, default_value = "stub:7")]
    pub identity_encoder: String,
    /// Feature extractor for FID.
    #[arg(long, default_value = "stub")]
    pub features: String,
    #[arg(long)]
    pub no_pose: bool,
    #[arg(long)]
    pub no_expression: bool,
    #[arg(long)]
    pub no_fid: bool,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Training output directory, metrics log, or calibration report.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum ConfigCommand {
    /// List preset names.
    List,
    /// Print the model settings of a preset.
    Show {
        name: String,
        #[arg(long, value_enum, default_value = "paper")]
        scale: ScaleArg,
    },
    /// Print a full run configuration after inheritance and overrides.
    Dump(RunConfigArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = if cli.f64 {
        commands::run::<f64>(&cli.command)
    } else {
        commands::run::<f32>(&cli.command)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
