use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdct::model::{DepthFusionMode, DownsampleMode, FdctConfig, SIZE_MULTIPLE};

#[derive(Debug, Parser)]
#[command(
    name = "fdct",
    version,
    about = "Depth completion for transparent objects"
)]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset in the scene directory layout.
    GenData(GenDataArgs),
    /// Train a network and write checkpoints, history and the resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Complete a single raw depth image.
    Predict(PredictArgs),
    /// Print the parameter count and its per-block breakdown.
    ParamCount(ParamCountArgs),
    /// Train every ablation variant on the same data and compare them.
    Ablate(AblateArgs),
}

/// `HxW`, both positive multiples of 16.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("expected HxW, got {s:?}"))
    };
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(format!(
            "{h}x{w}: height and width must be positive multiples of {SIZE_MULTIPLE}"
        ));
    }
    Ok((h, w))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DownsampleArg {
    Max,
    Avg,
    Conv,
}

impl From<DownsampleArg> for DownsampleMode {
    fn from(a: DownsampleArg) -> Self {
        match a {
            DownsampleArg::Max => DownsampleMode::MaxPool,
            DownsampleArg::Avg => DownsampleMode::AvgPool,
            DownsampleArg::Conv => DownsampleMode::StridedConv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionArg {
    Conv,
    Concat,
}

impl From<FusionArg> for DepthFusionMode {
    fn from(a: FusionArg) -> Self {
        match a {
            FusionArg::Conv => DepthFusionMode::ConvFuse,
            FusionArg::Concat => DepthFusionMode::Concat,
        }
    }
}

/// Architecture flags; each one overrides the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct ModelFlags {
    /// Use the slim preset.
    #[arg(long)]
    pub slim: bool,
    /// Encoder downsampling.
    #[arg(long, value_enum)]
    pub downsample: Option<DownsampleArg>,
    /// How raw depth is merged into each block.
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Remove the shortcut fusion branch.
    #[arg(long)]
    pub no_fusion_branch: bool,
    /// Remove the cross-layer shortcuts.
    #[arg(long)]
    pub no_shortcuts: bool,
}

impl ModelFlags {
    pub fn apply(&self, m: &mut FdctConfig) {
        if self.slim {
            let depth_max = m.depth_max;
            *m = FdctConfig {
                downsample_mode: m.downsample_mode,
                depth_fusion_mode: m.depth_fusion_mode,
                use_fusion_branch: m.use_fusion_branch,
                use_cross_shortcuts: m.use_cross_shortcuts,
                depth_max,
                ..FdctConfig::slim()
            };
        }
        if let Some(d) = self.downsample {
            m.downsample_mode = d.into();
        }
        if let Some(f) = self.fusion {
            m.depth_fusion_mode = f.into();
        }
        if self.no_fusion_branch {
            m.use_fusion_branch = false;
        }
        if self.no_shortcuts {
            m.use_cross_shortcuts = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "160x224", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mean scene depth in meters.
    #[arg(long, default_value_t = 0.9)]
    pub base_depth: f64,
    /// Smooth bumps added to the ground plane.
    #[arg(long, default_value_t = 4)]
    pub bumps: usize,
    /// Transparent regions per scene.
    #[arg(long, default_value_t = 2)]
    pub regions: usize,
    /// Probability that a transparent pixel has no raw depth.
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Std of the raw depth noise inside transparent regions, in meters.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Upper bound of the per-region raw depth offset, in meters.
    #[arg(long, default_value_t = 0.05)]
    pub offset: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root (uses `<data>/train` when present).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset root; defaults to `<data>/val` when present.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training size as HxW.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Split subdirectory to use when present.
    #[arg(long, default_value = "test")]
    pub split: fdct::data::Split,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: PathBuf,
    /// Per-sample CSV; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Run configuration; defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation size as HxW; defaults to the run configuration's size.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Debug: score the ground truth itself instead of the network.
    #[arg(long, conflicts_with = "raw_as_prediction")]
    pub gt_as_prediction: bool,
    /// Score the raw sensor depth (copy-raw baseline) instead of the network.
    #[arg(long)]
    pub raw_as_prediction: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB PNG.
    #[arg(long)]
    pub rgb: PathBuf,
    /// Raw 16-bit millimeter depth PNG.
    #[arg(long)]
    pub depth: PathBuf,
    /// Output 16-bit millimeter depth PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Resize inputs to HxW first.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Also write an 8-bit side-by-side image of raw and completed depth.
    #[arg(long)]
    pub viz: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Output directory for the comparison table.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub slim: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}
