//! The full encoder / fusion-branch / decoder network.
//!
//! Resolution schedule for an `H x W` input (scale = divisor):
//!
//! ```text
//! head_in            1   -> C channels
//! ffeb1..ffeb4       1, 2, 4, 8 (each ends with a factor-2 downsample)
//! bottleneck         16
//! sfm1..sfm3         4, 8, 16   (branch state starts at ffeb1's output)
//! dfcb1..dfcb4       16, 8, 4, 2 (each ends with a factor-2 pixel shuffle)
//! head_out           1   -> 1 channel, linear
//! ```
//!
//! Cross-layer shortcuts project a block's pre-resampling features to one
//! channel and feed them two blocks later. The second block of each trunk
//! takes its shortcut from the trunk input (head output / bottleneck).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth::{DepthMap, RgbImage};
use crate::error::{FdctError, Result};
use crate::graph::{Graph, Var};
use crate::model::blocks::{Conv, Dfcb, Ffeb, Sfm};
use crate::model::config::FdctConfig;
use crate::params::ParamStore;
use crate::tensor::{downsample_nearest, Shape, Tensor};

/// Spatial sizes must be divisible by this.
pub const SIZE_MULTIPLE: usize = 16;
const STAGES: usize = 4;

/// Network inputs in tensor layout: RGB `(3, N, H, W)` and normalized raw
/// depth `(1, N, H, W)`.
#[derive(Clone, Debug)]
pub struct NetInput {
    pub rgb: Tensor,
    pub depth: Tensor,
}

#[derive(Clone, Debug)]
pub struct FdctNetwork {
    config: FdctConfig,
    params: ParamStore,
    head_in: Conv,
    ffebs: Vec<Ffeb>,
    sfms: Vec<Sfm>,
    dfcbs: Vec<Dfcb>,
    /// Projections feeding ffeb2, ffeb3, ffeb4.
    enc_shortcuts: Vec<Conv>,
    /// Projections feeding dfcb2, dfcb3, dfcb4.
    dec_shortcuts: Vec<Conv>,
    head_out: Conv,
}

impl FdctNetwork {
    /// Builds the network with fan-in scaled random kernels and zero biases.
    pub fn new(config: FdctConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let relu = std::f64::consts::SQRT_2;
        let shortcuts = config.use_cross_shortcuts;

        let head_in = Conv::new(&mut store, &mut rng, "head_in", 4, c, 3, 1, relu);
        let ffebs = (0..STAGES)
            .map(|k| {
                Ffeb::new(
                    &mut store,
                    &mut rng,
                    &format!("ffeb{}", k + 1),
                    c,
                    shortcuts && k > 0,
                    config.depth_fusion_mode,
                    config.downsample_mode,
                    config.osa_layers,
                    config.osa_stage_channels,
                )
            })
            .collect();
        let sfms = if config.use_fusion_branch {
            (0..STAGES - 1)
                .map(|k| Sfm::new(&mut store, &mut rng, &format!("sfm{}", k + 1), c))
                .collect()
        } else {
            Vec::new()
        };
        let dfcbs = (0..STAGES)
            .map(|k| {
                let feature_channels = if k == 0 && config.use_fusion_branch {
                    2 * c
                } else {
                    c
                };
                Dfcb::new(
                    &mut store,
                    &mut rng,
                    &format!("dfcb{}", k + 1),
                    c,
                    feature_channels,
                    shortcuts && k > 0,
                    config.depth_fusion_mode,
                    config.osa_layers,
                    config.osa_stage_channels,
                )
            })
            .collect();
        let projections = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            if shortcuts {
                (2..=STAGES)
                    .map(|k| Conv::new(store, rng, &format!("{prefix}{k}"), c, 1, 1, 1, 1.0))
                    .collect()
            } else {
                Vec::new()
            }
        };
        let enc_shortcuts = projections(&mut store, &mut rng, "enc_shortcut");
        let dec_shortcuts = projections(&mut store, &mut rng, "dec_shortcut");
        let head_out = Conv::new(&mut store, &mut rng, "head_out", c, 1, 3, 1, 1.0);

        Ok(Self {
            config,
            params: store,
            head_in,
            ffebs,
            sfms,
            dfcbs,
            enc_shortcuts,
            dec_shortcuts,
            head_out,
        })
    }

    pub fn config(&self) -> &FdctConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ffebs(&self) -> &[Ffeb] {
        &self.ffebs
    }

    pub fn dfcbs(&self) -> &[Dfcb] {
        &self.dfcbs
    }

    pub fn sfms(&self) -> &[Sfm] {
        &self.sfms
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Converts images into network tensors, validating shapes and values.
    pub fn prepare_inputs(&self, pairs: &[(&RgbImage, &DepthMap)]) -> Result<NetInput> {
        let Some((rgb0, _)) = pairs.first() else {
            return Err(FdctError::Input("empty batch".into()));
        };
        let (h, w) = rgb0.shape();
        check_input_size(h, w)?;
        let n = pairs.len();
        let plane = h * w;
        let mut rgb = Tensor::zeros(Shape::new(3, n, h, w));
        let mut depth = Tensor::zeros(Shape::new(1, n, h, w));
        let dmax = self.config.depth_max;
        for (i, (im, d)) in pairs.iter().enumerate() {
            if im.shape() != (h, w) || d.shape() != (h, w) {
                return Err(FdctError::Input(format!(
                    "batch item {i}: rgb {:?} / depth {:?} differ from {:?}",
                    im.shape(),
                    d.shape(),
                    (h, w)
                )));
            }
            for (p, px) in im.values().chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    rgb.data[(ch * n + i) * plane + p] = px[ch];
                }
            }
            for (p, v) in d.values().iter().enumerate() {
                depth.data[i * plane + p] = (v / dmax).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(NetInput { rgb, depth })
    }

    /// Records the forward pass on `g` and returns the `(1, N, H, W)`
    /// prediction in meters.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, input: &NetInput) -> Result<Var> {
        let s = input.depth.shape;
        check_input_size(s.h, s.w)?;
        let depth_at: Vec<Var> = (0..=STAGES)
            .map(|k| g.input(downsample_nearest(&input.depth, 1 << k)))
            .collect();
        let rgb = g.input(input.rgb.clone());
        let head = g.concat(&[rgb, depth_at[0]]);
        let h0 = self.head_in.apply_relu(g, head);
        g.tag("head_in", h0);

        // encoder
        let mut pre_pool = Vec::with_capacity(STAGES);
        let mut enc_out = Vec::with_capacity(STAGES);
        let mut x = h0;
        for (k, block) in self.ffebs.iter().enumerate() {
            let shortcut = if block.has_shortcut {
                let (src, factor) = if k == 1 {
                    (h0, 2)
                } else {
                    (pre_pool[k - 2], 4)
                };
                let proj = self.enc_shortcuts[k - 1].apply(g, src);
                let sc = g.max_pool(proj, factor);
                g.tag(format!("enc_shortcut{}", k + 1), sc);
                Some(sc)
            } else {
                None
            };
            let (out, pre) = block.forward(g, x, depth_at[k], shortcut)?;
            g.tag(format!("ffeb{}.pre_pool", k + 1), pre);
            g.tag(format!("ffeb{}.out", k + 1), out);
            pre_pool.push(pre);
            enc_out.push(out);
            x = out;
        }
        let bottleneck = x;

        // fusion branch
        let fused = if self.sfms.is_empty() {
            None
        } else {
            let mut f = enc_out[0];
            for (k, sfm) in self.sfms.iter().enumerate() {
                f = sfm.forward(g, f, enc_out[k + 1])?;
                g.tag(format!("sfm{}", k + 1), f);
            }
            Some(f)
        };

        // decoder
        let mut pre_shuffle = Vec::with_capacity(STAGES);
        let mut y = bottleneck;
        for (k, block) in self.dfcbs.iter().enumerate() {
            let scale = STAGES - k;
            let features = match (k, fused) {
                (0, Some(f)) => g.concat(&[y, f]),
                _ => y,
            };
            // residual from the encoder at the same scale; the bottleneck feeds dfcb1
            let enc_source = if k == 0 {
                bottleneck
            } else {
                pre_pool[STAGES - k]
            };
            let shortcut = if block.has_shortcut {
                let (src, factor) = if k == 1 {
                    (bottleneck, 2)
                } else {
                    (pre_shuffle[k - 2], 4)
                };
                let proj = self.dec_shortcuts[k - 1].apply(g, src);
                let sc = g.upsample(proj, factor);
                g.tag(format!("dec_shortcut{}", k + 1), sc);
                Some(sc)
            } else {
                None
            };
            let (out, pre) = block.forward(g, features, depth_at[scale], enc_source, shortcut)?;
            g.tag(format!("dfcb{}.out", k + 1), out);
            pre_shuffle.push(pre);
            y = out;
        }

        let out = self.head_out.apply(g, y);
        let pred = g.scale(out, self.config.depth_max as f32);
        g.tag("prediction", pred);
        Ok(pred)
    }

    /// Completed depth for a batch of `(rgb, raw depth)` pairs.
    pub fn predict_batch(&self, pairs: &[(&RgbImage, &DepthMap)]) -> Result<Vec<DepthMap>> {
        let input = self.prepare_inputs(pairs)?;
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, &input)?;
        tensor_to_depths(g.value(out))
    }

    pub fn forward(&self, rgb: &RgbImage, raw_depth: &DepthMap) -> Result<DepthMap> {
        Ok(self.predict_batch(&[(rgb, raw_depth)])?.remove(0))
    }
}

pub(crate) fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h < SIZE_MULTIPLE || w < SIZE_MULTIPLE || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(FdctError::Input(format!(
            "input size {h}x{w} must be at least and a multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Splits a `(1, N, H, W)` tensor into per-sample depth maps.
pub fn tensor_to_depths(t: &Tensor) -> Result<Vec<DepthMap>> {
    let s = t.shape;
    debug_assert_eq!(s.c, 1);
    t.data
        .chunks(s.plane())
        .map(|chunk| {
            DepthMap::new(s.h, s.w, chunk.iter().map(|v| *v as f64).collect())
                .map_err(|_| FdctError::Input("network produced a non-finite depth".into()))
        })
        .collect()
}
