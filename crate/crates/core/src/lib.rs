//! Depth completion for transparent objects.
//!
//! An encoder-decoder network built from one-shot-aggregation blocks takes an
//! RGB image and a raw sensor depth map and predicts a completed depth map.
//! The crate contains the network with its own reverse-mode autodiff, the
//! masked composite loss, evaluation metrics, a dataset loader for the
//! `<scene>/{rgb,depth,depth_gt,mask}` layout, a synthetic scene generator
//! and the training loop.
//!
//! ```no_run
//! use fdct::data::{generate_scene, SynthSceneSpec};
//! use fdct::model::{FdctConfig, FdctNetwork};
//!
//! let sample = generate_scene(&SynthSceneSpec::default())?;
//! let net = FdctNetwork::new(FdctConfig::slim(), 0)?;
//! let completed = net.forward(&sample.rgb, &sample.raw_depth)?;
//! assert_eq!(completed.shape(), sample.shape());
//! # Ok::<(), fdct::FdctError>(())
//! ```

pub mod config_file;
pub mod data;
pub mod depth;
mod direct;
mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use depth::{DepthMap, RgbImage, Sample, TransparentMask, ValidRange};
pub use error::{FdctError, Result};
