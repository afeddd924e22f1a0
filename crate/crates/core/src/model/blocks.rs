//! Building blocks of the network: OSA module, encoder block (FFEB),
//! decoder block (DFCB) and shortcut fusion module (SFM).

use rand::Rng;

use crate::error::{FdctError, Result};
use crate::graph::{Graph, Var};
use crate::model::config::{DepthFusionMode, DownsampleMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::ConvGeom;

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
const LINEAR_GAIN: f64 = 1.0;

/// Square convolution with a bias, registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let weight = store.push_kernel(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            gain,
            rng,
        );
        let bias = store.push(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self {
            weight,
            bias,
            cin,
            cout,
            geom: ConvGeom {
                kernel,
                stride,
                pad: kernel / 2,
            },
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.conv(x, self.weight, Some(self.bias), self.geom)
    }

    pub(crate) fn apply_relu(&self, g: &mut Graph, x: Var) -> Var {
        g.conv_relu(x, self.weight, Some(self.bias), self.geom)
    }
}

fn expect_channels(g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
    let got = g.shape(x).c;
    if got != want {
        return Err(FdctError::Config(format!(
            "{what} expects {want} channels, got {got}"
        )));
    }
    Ok(())
}

fn expect_same_grid(g: &Graph, vars: &[(Var, &str)]) -> Result<()> {
    let s0 = g.shape(vars[0].0);
    for (v, name) in &vars[1..] {
        let s = g.shape(*v);
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(FdctError::Dimension(format!(
                "{name} is {}x{} but {} is {}x{}",
                s.h, s.w, vars[0].1, s0.h, s0.w
            )));
        }
    }
    Ok(())
}

/// One-shot aggregation: a chain of 3x3 convolutions whose outputs are all
/// concatenated once (together with the block input), squeezed back to
/// `channels` by a 1x1 convolution and added to an identity path.
#[derive(Clone, Debug)]
pub struct Osa {
    pub in_channels: usize,
    pub channels: usize,
    pub layers: Vec<Conv>,
    pub reduce: Conv,
}

impl Osa {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        channels: usize,
        n_layers: usize,
        stage: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { stage };
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.conv{}", i + 1),
                    cin,
                    stage,
                    3,
                    1,
                    RELU_GAIN,
                )
            })
            .collect();
        let reduce = Conv::new(
            store,
            rng,
            &format!("{name}.reduce"),
            in_channels + n_layers * stage,
            channels,
            1,
            1,
            RELU_GAIN,
        );
        Self {
            in_channels,
            channels,
            layers,
            reduce,
        }
    }

    /// Width of the aggregation concat feeding the 1x1 reducer.
    pub fn concat_width(&self) -> usize {
        self.reduce.cin
    }

    /// `identity + relu(reduce([input, l1, ..., lL]))`.
    pub fn forward(&self, g: &mut Graph, input: Var, identity: Var) -> Result<Var> {
        expect_channels(g, input, self.in_channels, "OSA input")?;
        expect_channels(g, identity, self.channels, "OSA identity path")?;
        expect_same_grid(g, &[(input, "OSA input"), (identity, "OSA identity")])?;
        let mut stages = vec![input];
        let mut cur = input;
        for layer in &self.layers {
            cur = layer.apply_relu(g, cur);
            stages.push(cur);
        }
        let agg = g.concat(&stages);
        let reduced = self.reduce.apply_relu(g, agg);
        Ok(g.add(identity, reduced))
    }
}

/// Factor-2 downsampling at the end of an encoder block.
#[derive(Clone, Debug)]
pub enum Downsample {
    MaxPool,
    AvgPool,
    StridedConv(Conv),
}

impl Downsample {
    pub(crate) fn new(
        mode: DownsampleMode,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        match mode {
            DownsampleMode::MaxPool => Self::MaxPool,
            DownsampleMode::AvgPool => Self::AvgPool,
            DownsampleMode::StridedConv => Self::StridedConv(Conv::new(
                store,
                rng,
                &format!("{name}.down"),
                channels,
                channels,
                3,
                2,
                RELU_GAIN,
            )),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            Self::MaxPool => g.max_pool(x, 2),
            Self::AvgPool => g.avg_pool(x, 2),
            Self::StridedConv(conv) => conv.apply_relu(g, x),
        }
    }
}

/// Concatenates `parts` and either fuses them with a 3x3 convolution (the
/// result is both OSA input and identity) or, in concat mode, hands the raw
/// concat to the OSA alongside the given identity.
fn fuse_inputs(g: &mut Graph, fuse: Option<&Conv>, identity: Var, parts: &[Var]) -> (Var, Var) {
    let cat = g.concat(parts);
    match fuse {
        Some(conv) => {
            let fused = conv.apply_relu(g, cat);
            (fused, fused)
        }
        None => (cat, identity),
    }
}

/// Encoder block (feature fusion and extraction).
#[derive(Clone, Debug)]
pub struct Ffeb {
    pub name: String,
    pub channels: usize,
    pub has_shortcut: bool,
    pub fuse: Option<Conv>,
    pub osa: Osa,
    pub down: Downsample,
}

impl Ffeb {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        has_shortcut: bool,
        fusion: DepthFusionMode,
        downsample: DownsampleMode,
        osa_layers: usize,
        stage: usize,
    ) -> Self {
        let cat_width = channels + 1 + usize::from(has_shortcut);
        let (fuse, osa_in) = match fusion {
            DepthFusionMode::ConvFuse => (
                Some(Conv::new(
                    store,
                    rng,
                    &format!("{name}.fuse"),
                    cat_width,
                    channels,
                    3,
                    1,
                    RELU_GAIN,
                )),
                channels,
            ),
            DepthFusionMode::Concat => (None, cat_width),
        };
        let osa = Osa::new(
            store,
            rng,
            &format!("{name}.osa"),
            osa_in,
            channels,
            osa_layers,
            stage,
        );
        let down = Downsample::new(downsample, store, rng, name, channels);
        Self {
            name: name.to_string(),
            channels,
            has_shortcut,
            fuse,
            osa,
            down,
        }
    }

    /// Width of the concatenated input before fusion.
    pub fn concat_width(&self) -> usize {
        self.channels + 1 + usize::from(self.has_shortcut)
    }

    /// Returns `(out, pre_pool)`; `out` has half the resolution of `features`.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: Var,
        depth: Var,
        shortcut: Option<Var>,
    ) -> Result<(Var, Var)> {
        expect_channels(g, features, self.channels, &self.name)?;
        expect_channels(g, depth, 1, "depth input")?;
        if shortcut.is_some() != self.has_shortcut {
            return Err(FdctError::Config(format!(
                "{} was built {} a cross-layer shortcut",
                self.name,
                if self.has_shortcut { "with" } else { "without" }
            )));
        }
        let mut parts = vec![features, depth];
        let mut grid = vec![(features, "features"), (depth, "depth")];
        if let Some(s) = shortcut {
            expect_channels(g, s, 1, "shortcut")?;
            parts.push(s);
            grid.push((s, "shortcut"));
        }
        expect_same_grid(g, &grid)?;
        let (osa_in, identity) = fuse_inputs(g, self.fuse.as_ref(), features, &parts);
        let pre_pool = self.osa.forward(g, osa_in, identity)?;
        let out = self.down.apply(g, pre_pool);
        Ok((out, pre_pool))
    }
}

/// Fusion-branch unit: pools the running branch state, concatenates the next
/// encoder output and mixes channels with a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Sfm {
    pub channels: usize,
    pub reduce: Conv,
}

impl Sfm {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            channels,
            reduce: Conv::new(
                store,
                rng,
                &format!("{name}.reduce"),
                2 * channels,
                channels,
                1,
                1,
                RELU_GAIN,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, prev: Var, enc_out: Var) -> Result<Var> {
        expect_channels(g, prev, self.channels, "SFM branch state")?;
        expect_channels(g, enc_out, self.channels, "SFM encoder input")?;
        let (p, e) = (g.shape(prev), g.shape(enc_out));
        if p.h != 2 * e.h || p.w != 2 * e.w || p.n != e.n {
            return Err(FdctError::Dimension(format!(
                "SFM needs the branch state at twice the encoder resolution: {}x{} vs {}x{}",
                p.h, p.w, e.h, e.w
            )));
        }
        let pooled = g.max_pool(prev, 2);
        let cat = g.concat(&[pooled, enc_out]);
        Ok(self.reduce.apply_relu(g, cat))
    }
}

/// Decoder block (depth fusion and completion).
#[derive(Clone, Debug)]
pub struct Dfcb {
    pub name: String,
    pub channels: usize,
    pub feature_channels: usize,
    pub has_shortcut: bool,
    pub residual: Conv,
    pub fuse: Option<Conv>,
    pub osa: Osa,
    pub expand: Conv,
}

impl Dfcb {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        feature_channels: usize,
        has_shortcut: bool,
        fusion: DepthFusionMode,
        osa_layers: usize,
        stage: usize,
    ) -> Self {
        let residual = Conv::new(
            store,
            rng,
            &format!("{name}.residual"),
            channels,
            channels,
            1,
            1,
            RELU_GAIN,
        );
        let cat_width = feature_channels + 1 + channels + usize::from(has_shortcut);
        let (fuse, osa_in) = match fusion {
            DepthFusionMode::ConvFuse => (
                Some(Conv::new(
                    store,
                    rng,
                    &format!("{name}.fuse"),
                    cat_width,
                    channels,
                    3,
                    1,
                    RELU_GAIN,
                )),
                channels,
            ),
            DepthFusionMode::Concat => (None, cat_width),
        };
        let osa = Osa::new(
            store,
            rng,
            &format!("{name}.osa"),
            osa_in,
            channels,
            osa_layers,
            stage,
        );
        let expand = Conv::new(
            store,
            rng,
            &format!("{name}.shuffle"),
            channels,
            4 * channels,
            1,
            1,
            LINEAR_GAIN,
        );
        Self {
            name: name.to_string(),
            channels,
            feature_channels,
            has_shortcut,
            residual,
            fuse,
            osa,
            expand,
        }
    }

    pub fn concat_width(&self) -> usize {
        self.feature_channels + 1 + self.channels + usize::from(self.has_shortcut)
    }

    /// Returns `(out, pre_shuffle)`; `out` has twice the resolution of `features`.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: Var,
        depth: Var,
        enc_source: Var,
        shortcut: Option<Var>,
    ) -> Result<(Var, Var)> {
        expect_channels(g, features, self.feature_channels, &self.name)?;
        expect_channels(g, depth, 1, "depth input")?;
        expect_channels(g, enc_source, self.channels, "encoder residual")?;
        if shortcut.is_some() != self.has_shortcut {
            return Err(FdctError::Config(format!(
                "{} was built {} a cross-layer shortcut",
                self.name,
                if self.has_shortcut { "with" } else { "without" }
            )));
        }
        let mut grid = vec![
            (features, "features"),
            (depth, "depth"),
            (enc_source, "encoder residual"),
        ];
        if let Some(s) = shortcut {
            expect_channels(g, s, 1, "shortcut")?;
            grid.push((s, "shortcut"));
        }
        expect_same_grid(g, &grid)?;

        let residual = self.residual.apply_relu(g, enc_source);
        let mut parts = vec![features, depth, residual];
        parts.extend(shortcut);
        // in concat mode the identity path is the leading C feature channels
        let identity = if self.fuse.is_none() && self.feature_channels != self.channels {
            g.narrow(features, self.channels)
        } else {
            features
        };
        let (osa_in, identity) = fuse_inputs(g, self.fuse.as_ref(), identity, &parts);
        let pre_shuffle = self.osa.forward(g, osa_in, identity)?;
        let expanded = self.expand.apply(g, pre_shuffle);
        Ok((g.pixel_shuffle(expanded, 2), pre_shuffle))
    }
}
