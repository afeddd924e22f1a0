//! Dataset access for the `<root>/<scene>/{rgb,depth,depth_gt,mask}` layout
//! and the synthetic scene generator.

mod batch;
mod dataset;
pub mod png;
mod synth;

pub use batch::{
    batch_iterator, epoch_batches, epoch_order, BatchIter, SampleSource, SizedIndex, SynthSource,
};
pub use dataset::{
    get_sample, load_dataset, resize_bilinear, resize_depth_nearest, resize_mask_nearest,
    DatasetIndex, Entry, Split,
};
pub use synth::{
    generate_scene, parse_manifest, scene_seed, write_synthetic_dataset, DatasetManifest,
    SynthSceneSpec, GT_MAX, GT_MIN, MANIFEST_FILE,
};
