use serde::{Deserialize, Serialize};

use crate::error::{FdctError, Result};

/// How each encoder block halves its resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    MaxPool,
    AvgPool,
    /// 3x3 convolution with stride 2.
    StridedConv,
}

/// How the raw depth enters each encoder / decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFusionMode {
    /// 3x3 convolution over `[features, depth, ...]` before the OSA module.
    ConvFuse,
    /// Ablation: depth concatenated straight into the OSA input.
    Concat,
}

impl std::str::FromStr for DownsampleMode {
    type Err = FdctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "max_pool" => Ok(Self::MaxPool),
            "avg" | "avg_pool" => Ok(Self::AvgPool),
            "conv" | "strided_conv" => Ok(Self::StridedConv),
            _ => Err(FdctError::Config(format!("unknown downsample mode {s:?}"))),
        }
    }
}

impl std::str::FromStr for DepthFusionMode {
    type Err = FdctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "conv_fuse" => Ok(Self::ConvFuse),
            "concat" => Ok(Self::Concat),
            _ => Err(FdctError::Config(format!(
                "unknown depth fusion mode {s:?}"
            ))),
        }
    }
}

/// Architecture hyperparameters, including every ablation switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdctConfig {
    pub channels: usize,
    pub osa_layers: usize,
    pub osa_stage_channels: usize,
    pub downsample_mode: DownsampleMode,
    pub depth_fusion_mode: DepthFusionMode,
    pub use_fusion_branch: bool,
    pub use_cross_shortcuts: bool,
    /// Divisor mapping meters onto the network's `[0, 1]` depth range.
    pub depth_max: f64,
}

impl FdctConfig {
    pub fn full() -> Self {
        Self {
            channels: 64,
            osa_layers: 5,
            osa_stage_channels: 20,
            downsample_mode: DownsampleMode::MaxPool,
            depth_fusion_mode: DepthFusionMode::ConvFuse,
            use_fusion_branch: true,
            use_cross_shortcuts: true,
            depth_max: 10.0,
        }
    }

    pub fn slim() -> Self {
        Self {
            channels: 32,
            osa_layers: 4,
            osa_stage_channels: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.osa_layers == 0 || self.osa_stage_channels == 0 {
            return Err(FdctError::Config(
                "channels, osa_layers and osa_stage_channels must all be >= 1".into(),
            ));
        }
        if !(self.depth_max > 0.0 && self.depth_max.is_finite()) {
            return Err(FdctError::Config(format!(
                "depth_max must be positive, got {}",
                self.depth_max
            )));
        }
        Ok(())
    }
}

impl Default for FdctConfig {
    fn default() -> Self {
        Self::full()
    }
}
