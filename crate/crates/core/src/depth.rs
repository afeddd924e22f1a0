//! Image carriers shared by every stage, plus validity masking, depth
//! normalization and image-space surface normals.

use serde::{Deserialize, Serialize};

use crate::error::{FdctError, Result};

/// Single-channel depth image in meters. Missing readings are stored as `0.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len(), "depth map")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FdctError::Input(format!(
                "depth value at index {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                assert!(v.is_finite(), "depth value at ({r}, {c}) is not finite");
                values.push(v);
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(v.is_finite());
        self.values[r * self.width + c] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Returns a copy with every value clamped into `[lo, hi]`.
    pub fn clamped(&self, lo: f64, hi: f64) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }
}

/// RGB image with channel values in `[0, 1]`, stored interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_dims(height, width * 3, values.len(), "rgb image")?;
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(FdctError::Input(format!(
                "rgb value at index {i} lies outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let values = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, values).expect("fill colour must lie in [0, 1]")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-pixel membership in a transparent object (or, after
/// [`valid_pixels`], in the set every loss and metric is evaluated on).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransparentMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl TransparentMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        check_dims(height, width, values.len(), "mask")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.width + c]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }
}

/// One aligned training / evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: RgbImage,
    pub raw_depth: DepthMap,
    pub gt_depth: DepthMap,
    pub mask: TransparentMask,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        rgb: RgbImage,
        raw_depth: DepthMap,
        gt_depth: DepthMap,
        mask: TransparentMask,
    ) -> Result<Self> {
        let shape = gt_depth.shape();
        if rgb.shape() != shape || raw_depth.shape() != shape || mask.shape() != shape {
            return Err(FdctError::Dimension(format!(
                "sample images disagree: rgb {:?}, raw {:?}, gt {:?}, mask {:?}",
                rgb.shape(),
                raw_depth.shape(),
                shape,
                mask.shape()
            )));
        }
        Ok(Self {
            id: id.into(),
            rgb,
            raw_depth,
            gt_depth,
            mask,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.gt_depth.shape()
    }
}

/// Ground-truth depths outside `[lo, hi]` meters are excluded from losses and metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValidRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(FdctError::Config(format!(
                "valid range requires 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn contains(&self, d: f64) -> bool {
        self.lo <= d && d <= self.hi
    }
}

impl Default for ValidRange {
    fn default() -> Self {
        Self { lo: 0.3, hi: 1.5 }
    }
}

/// Pixels that are both transparent and carry an in-range ground truth.
pub fn valid_pixels(
    gt: &DepthMap,
    mask: &TransparentMask,
    range: ValidRange,
) -> Result<TransparentMask> {
    if gt.shape() != mask.shape() {
        return Err(FdctError::Dimension(format!(
            "gt {:?} vs mask {:?}",
            gt.shape(),
            mask.shape()
        )));
    }
    let values = gt
        .values
        .iter()
        .zip(&mask.values)
        .map(|(d, m)| *m && range.contains(*d))
        .collect();
    Ok(TransparentMask {
        height: gt.height,
        width: gt.width,
        values,
    })
}

/// Scales depth into `[0, 1]` by a fixed divisor; missing pixels stay at 0.
pub fn normalize_depth(d: &DepthMap, depth_max: f64) -> Result<Vec<f64>> {
    if !(depth_max > 0.0 && depth_max.is_finite()) {
        return Err(FdctError::Config(format!(
            "depth_max must be positive, got {depth_max}"
        )));
    }
    Ok(d.values
        .iter()
        .map(|v| (v / depth_max).clamp(0.0, 1.0))
        .collect())
}

/// Image-space depth gradients: central differences in the interior,
/// one-sided differences on the border, zero along an axis of length 1.
pub fn depth_gradients(d: &DepthMap) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = d.shape();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            gx[r * w + c] = axis_diff(w, c, |i| d.get(r, i));
            gy[r * w + c] = axis_diff(h, r, |i| d.get(i, c));
        }
    }
    (gx, gy)
}

#[inline]
pub(crate) fn axis_diff(len: usize, i: usize, at: impl Fn(usize) -> f64) -> f64 {
    if len < 2 {
        0.0
    } else if i == 0 {
        at(1) - at(0)
    } else if i == len - 1 {
        at(len - 1) - at(len - 2)
    } else {
        0.5 * (at(i + 1) - at(i - 1))
    }
}

/// Unit surface normals, one per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub height: usize,
    pub width: usize,
    pub normals: Vec<[f64; 3]>,
}

impl NormalMap {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        self.normals[r * self.width + c]
    }
}

/// Normalized `(-g_x, -g_y, 1)` at every pixel, with unit pixel spacing.
pub fn normals_from_depth(d: &DepthMap) -> NormalMap {
    let (gx, gy) = depth_gradients(d);
    let normals = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            let n = (x * x + y * y + 1.0).sqrt();
            [-x / n, -y / n, 1.0 / n]
        })
        .collect();
    NormalMap {
        height: d.height,
        width: d.width,
        normals,
    }
}

fn check_dims(height: usize, width: usize, len: usize, what: &str) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(FdctError::Dimension(format!("{what} must be non-empty")));
    }
    if height * width != len {
        return Err(FdctError::Dimension(format!(
            "{what} expects {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}
