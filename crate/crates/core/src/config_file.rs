//! Flat key-value run configuration (TOML syntax).
//!
//! Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `preset` | `"full"` or `"slim"`, applied before every other model key |
//! | `channels`, `osa_layers`, `osa_stage_channels` | trunk widths |
//! | `downsample_mode` | `max_pool`, `avg_pool` or `strided_conv` |
//! | `depth_fusion_mode` | `conv_fuse` or `concat` |
//! | `use_fusion_branch`, `use_cross_shortcuts` | ablation switches |
//! | `depth_max` | depth normalization divisor in meters |
//! | `delta`, `alpha`, `beta`, `epsilon`, `c1`, `c2` | loss constants |
//! | `edge_weighting`, `edge_blur_sigma` | edge-aware Huber weighting |
//! | `valid_lo`, `valid_hi` | valid ground-truth depth range in meters |
//! | `initial_lr`, `milestone_epochs`, `lr_factor`, `epochs`, `batch_size` | schedule |
//! | `weight_decay`, `beta1`, `beta2`, `eps`, `grad_clip` | optimizer |
//! | `seed`, `eval_every` | run control |
//! | `height`, `width` | training resolution |
//!
//! `c1` and `c2` default to `(0.01 * valid_hi)^2` and `(0.03 * valid_hi)^2`.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::depth::ValidRange;
use crate::error::{FdctError, Result};
use crate::losses::LossConfig;
use crate::model::{DepthFusionMode, DownsampleMode, FdctConfig, SIZE_MULTIPLE};
use crate::train::TrainConfig;

pub const KEYS: &[&str] = &[
    "preset",
    "channels",
    "osa_layers",
    "osa_stage_channels",
    "downsample_mode",
    "depth_fusion_mode",
    "use_fusion_branch",
    "use_cross_shortcuts",
    "depth_max",
    "delta",
    "alpha",
    "beta",
    "epsilon",
    "c1",
    "c2",
    "edge_weighting",
    "edge_blur_sigma",
    "valid_lo",
    "valid_hi",
    "initial_lr",
    "milestone_epochs",
    "lr_factor",
    "epochs",
    "batch_size",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "grad_clip",
    "seed",
    "eval_every",
    "height",
    "width",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: FdctConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub range: ValidRange,
    /// `(height, width)` of training inputs.
    pub size: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: FdctConfig::full(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            range: ValidRange::default(),
            size: (240, 320),
        }
    }
}

fn key_err(key: &str, what: &str) -> FdctError {
    FdctError::Config(format!("config key `{key}`: {what}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(key_err(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| key_err(key, "expected a non-negative integer"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| key_err(key, "expected true or false"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| key_err(key, "expected a string"))
}

pub fn downsample_name(m: DownsampleMode) -> &'static str {
    match m {
        DownsampleMode::MaxPool => "max_pool",
        DownsampleMode::AvgPool => "avg_pool",
        DownsampleMode::StridedConv => "strided_conv",
    }
}

pub fn fusion_name(m: DepthFusionMode) -> &'static str {
    match m {
        DepthFusionMode::ConvFuse => "conv_fuse",
        DepthFusionMode::Concat => "concat",
    }
}

impl RunConfig {
    /// Parses a config document over the defaults. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            FdctError::Config(format!("config syntax: {}", e.message()))
        })?;
        let mut cfg = Self::default();
        cfg.apply(&table)?;
        Ok(cfg)
    }

    /// Applies `table` on top of `self`.
    pub fn apply(&mut self, table: &Table) -> Result<()> {
        if let Some((key, _)) = table.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return Err(FdctError::Config(format!("unknown config key `{key}`")));
        }
        if let Some(v) = table.get("preset") {
            self.model = match as_str("preset", v)? {
                "full" => FdctConfig::full(),
                "slim" => FdctConfig::slim(),
                other => return Err(key_err("preset", &format!("unknown preset {other:?}"))),
            };
        }
        let (mut c1_set, mut c2_set) = (false, false);
        for (key, v) in table {
            let k = key.as_str();
            match k {
                "preset" => {}
                "channels" => self.model.channels = as_usize(k, v)?,
                "osa_layers" => self.model.osa_layers = as_usize(k, v)?,
                "osa_stage_channels" => self.model.osa_stage_channels = as_usize(k, v)?,
                "downsample_mode" => {
                    self.model.downsample_mode = as_str(k, v)?
                        .parse()
                        .map_err(|e: FdctError| key_err(k, &e.to_string()))?
                }
                "depth_fusion_mode" => {
                    self.model.depth_fusion_mode = as_str(k, v)?
                        .parse()
                        .map_err(|e: FdctError| key_err(k, &e.to_string()))?
                }
                "use_fusion_branch" => self.model.use_fusion_branch = as_bool(k, v)?,
                "use_cross_shortcuts" => self.model.use_cross_shortcuts = as_bool(k, v)?,
                "depth_max" => self.model.depth_max = as_f64(k, v)?,
                "delta" => self.loss.delta = as_f64(k, v)?,
                "alpha" => self.loss.alpha = as_f64(k, v)?,
                "beta" => self.loss.beta = as_f64(k, v)?,
                "epsilon" => self.loss.epsilon = as_f64(k, v)?,
                "c1" => {
                    self.loss.c1 = as_f64(k, v)?;
                    c1_set = true;
                }
                "c2" => {
                    self.loss.c2 = as_f64(k, v)?;
                    c2_set = true;
                }
                "edge_weighting" => self.loss.edge_weighting = as_bool(k, v)?,
                "edge_blur_sigma" => self.loss.edge_blur_sigma = as_f64(k, v)?,
                "valid_lo" => self.range.lo = as_f64(k, v)?,
                "valid_hi" => self.range.hi = as_f64(k, v)?,
                "initial_lr" => self.train.initial_lr = as_f64(k, v)?,
                "milestone_epochs" => {
                    let arr = v
                        .as_array()
                        .ok_or_else(|| key_err(k, "expected an array of integers"))?;
                    self.train.milestone_epochs =
                        arr.iter().map(|x| as_usize(k, x)).collect::<Result<_>>()?;
                }
                "lr_factor" => self.train.lr_factor = as_f64(k, v)?,
                "epochs" => self.train.epochs = as_usize(k, v)?,
                "batch_size" => self.train.batch_size = as_usize(k, v)?,
                "weight_decay" => self.train.weight_decay = as_f64(k, v)?,
                "beta1" => self.train.beta1 = as_f64(k, v)?,
                "beta2" => self.train.beta2 = as_f64(k, v)?,
                "eps" => self.train.eps = as_f64(k, v)?,
                "grad_clip" => self.train.grad_clip = Some(as_f64(k, v)?),
                "seed" => {
                    self.train.seed = v
                        .as_integer()
                        .and_then(|i| u64::try_from(i).ok())
                        .ok_or_else(|| key_err(k, "expected a non-negative integer"))?
                }
                "eval_every" => self.train.eval_every = as_usize(k, v)?,
                "height" => self.size.0 = as_usize(k, v)?,
                "width" => self.size.1 = as_usize(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        if table.contains_key("valid_hi") {
            let derived = LossConfig::for_range(self.range);
            if !c1_set {
                self.loss.c1 = derived.c1;
            }
            if !c2_set {
                self.loss.c2 = derived.c2;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        ValidRange::new(self.range.lo, self.range.hi)?;
        let (h, w) = self.size;
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(FdctError::Config(format!(
                "size {h}x{w} must be positive multiples of {SIZE_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// The fully resolved document; parsing it yields `self` again.
    pub fn to_toml(&self) -> String {
        let mut t = Table::new();
        let m = &self.model;
        let int = |x: usize| Value::Integer(x as i64);
        t.insert("channels".into(), int(m.channels));
        t.insert("osa_layers".into(), int(m.osa_layers));
        t.insert("osa_stage_channels".into(), int(m.osa_stage_channels));
        t.insert(
            "downsample_mode".into(),
            Value::String(downsample_name(m.downsample_mode).into()),
        );
        t.insert(
            "depth_fusion_mode".into(),
            Value::String(fusion_name(m.depth_fusion_mode).into()),
        );
        t.insert(
            "use_fusion_branch".into(),
            Value::Boolean(m.use_fusion_branch),
        );
        t.insert(
            "use_cross_shortcuts".into(),
            Value::Boolean(m.use_cross_shortcuts),
        );
        t.insert("depth_max".into(), Value::Float(m.depth_max));
        let l = &self.loss;
        for (k, v) in [
            ("delta", l.delta),
            ("alpha", l.alpha),
            ("beta", l.beta),
            ("epsilon", l.epsilon),
            ("c1", l.c1),
            ("c2", l.c2),
            ("edge_blur_sigma", l.edge_blur_sigma),
            ("valid_lo", self.range.lo),
            ("valid_hi", self.range.hi),
            ("initial_lr", self.train.initial_lr),
            ("lr_factor", self.train.lr_factor),
            ("weight_decay", self.train.weight_decay),
            ("beta1", self.train.beta1),
            ("beta2", self.train.beta2),
            ("eps", self.train.eps),
        ] {
            t.insert(k.into(), Value::Float(v));
        }
        t.insert("edge_weighting".into(), Value::Boolean(l.edge_weighting));
        t.insert(
            "milestone_epochs".into(),
            Value::Array(
                self.train
                    .milestone_epochs
                    .iter()
                    .map(|x| int(*x))
                    .collect(),
            ),
        );
        t.insert("epochs".into(), int(self.train.epochs));
        t.insert("batch_size".into(), int(self.train.batch_size));
        if let Some(c) = self.train.grad_clip {
            t.insert("grad_clip".into(), Value::Float(c));
        }
        t.insert("seed".into(), Value::Integer(self.train.seed as i64));
        t.insert("eval_every".into(), int(self.train.eval_every));
        t.insert("height".into(), int(self.size.0));
        t.insert("width".into(), int(self.size.1));
        toml::to_string(&t).expect("flat table serializes")
    }
}
