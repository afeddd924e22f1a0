//! Network architecture, parameter accounting and checkpoints.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod network;

pub use checkpoint::{Checkpoint, OptimizerState, TrainingState};
pub use config::{DepthFusionMode, DownsampleMode, FdctConfig};
pub use network::{tensor_to_depths, FdctNetwork, NetInput, SIZE_MULTIPLE};
