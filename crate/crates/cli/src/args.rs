use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "detkit",
    version,
    about = "Gamma correction, CARAFE, state-space and detection-evaluation toolkit"
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Suppress summaries on standard output.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adaptive gamma correction of a PPM image.
    Gamma(GammaArgs),
    /// CARAFE upsampling of a dumped feature map.
    Upsample(UpsampleArgs),
    /// Check scan/convolution agreement on random state-space systems.
    SsmCheck(SsmArgs),
    /// Check Focal IoU gradients against finite differences.
    LossCheck(LossArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Label statistics of a dataset directory.
    Stats(StatsArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Run the seeded forward chain and dump every stage.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GammaArgs {
    #[arg(long, value_name = "PPM")]
    pub input: PathBuf,
    #[arg(long)]
    pub g_min: Option<f64>,
    #[arg(long)]
    pub g_max: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormArg {
    Softmax,
    Raw,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    /// Tensor dump, or a PPM image.
    #[arg(long)]
    pub input: PathBuf,
    /// Weight file with a `carafe` section group; seeded weights otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub c_mid: Option<usize>,
    #[arg(long)]
    pub k_encoder: Option<usize>,
    #[arg(long)]
    pub k_up: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
}

#[derive(Debug, Args)]
pub struct SsmArgs {
    /// State size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    pub l: Option<usize>,
    /// Number of random systems.
    #[arg(long)]
    pub systems: Option<usize>,
    #[arg(long, hide = true)]
    pub corrupt_kernel: bool,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub iou_thresh: Option<f64>,
    #[arg(long)]
    pub alpha_high: Option<f64>,
    #[arg(long)]
    pub alpha_low: Option<f64>,
    #[arg(long)]
    pub focusing_gamma: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ApModeArg {
    AllPoint,
    Coco101,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<image>.txt` files with `class cx cy w h confidence` rows.
    #[arg(long, value_name = "DIR")]
    pub detections: PathBuf,
    /// Directory of `<image>.txt` label files.
    #[arg(long, value_name = "DIR")]
    pub ground_truth: PathBuf,
    /// Comma-separated IoU thresholds for the range metric.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub ap_mode: Option<ApModeArg>,
    /// Class names, one per line.
    #[arg(long, value_name = "FILE")]
    pub classes: Option<PathBuf>,
    /// Record wall-clock timings in the report.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Also write `detections/` copied from the labels with confidence 1.
    #[arg(long)]
    pub copy_detections: bool,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub size: Option<usize>,
    /// Stem output channels.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    /// Re-apply feature-level gamma correction before upsampling.
    #[arg(long)]
    pub gamma_per_upsample: bool,
    /// Re-run every stage of an existing demo directory and compare.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["size", "channels", "images", "gamma_per_upsample"])]
    pub replay: Option<PathBuf>,
    #[arg(long)]
    pub timings: bool,
}
