use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::png;
use crate::depth::{DepthMap, RgbImage, Sample, TransparentMask};
use crate::error::{FdctError, Result};

pub const RGB_DIR: &str = "rgb";
pub const DEPTH_DIR: &str = "depth";
pub const GT_DIR: &str = "depth_gt";
pub const MASK_DIR: &str = "mask";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = FdctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(FdctError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// File quadruple of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<Entry>,
    /// One message per skipped frame.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in std::fs::read_dir(path).map_err(|e| FdctError::io(path, e))? {
        out.push(item.map_err(|e| FdctError::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Indexes `<root>/<scene>/{rgb,depth,depth_gt,mask}/NNNN.png`.
///
/// When `root/<split>` exists it is used as the scene root, otherwise `root`
/// itself. Incomplete or undecodable frames are skipped and reported.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(FdctError::io(root, "dataset directory not found"));
    }
    let split_root = root.join(split.as_str());
    let base = if split_root.is_dir() {
        split_root
    } else {
        root.to_path_buf()
    };

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for scene in sorted_dir(&base)? {
        let rgb_dir = scene.join(RGB_DIR);
        if !rgb_dir.is_dir() {
            continue;
        }
        let scene_name = scene
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        for rgb in sorted_dir(&rgb_dir)? {
            if rgb.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let file = rgb.file_name().unwrap_or_default().to_owned();
            let entry = Entry {
                id: format!(
                    "{scene_name}/{}",
                    Path::new(&file).with_extension("").display()
                ),
                depth: scene.join(DEPTH_DIR).join(&file),
                gt: scene.join(GT_DIR).join(&file),
                mask: scene.join(MASK_DIR).join(&file),
                rgb,
            };
            match check_entry(&entry) {
                Ok(()) => entries.push(entry),
                Err(msg) => {
                    log::warn!("skipping {}: {msg}", entry.id);
                    warnings.push(format!("{}: {msg}", entry.id));
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(FdctError::Dataset(format!(
            "no usable frames under {} ({} skipped)",
            base.display(),
            warnings.len()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        entries,
        warnings,
    })
}

fn check_entry(e: &Entry) -> Result<(), String> {
    let mut shape = None;
    for p in [&e.rgb, &e.depth, &e.gt, &e.mask] {
        if !p.is_file() {
            return Err(format!("missing {}", p.display()));
        }
        let dims = png::read_dimensions(p).map_err(|err| err.to_string())?;
        match shape {
            None => shape = Some(dims),
            Some(s) if s != dims => {
                return Err(format!("{} is {:?}, expected {:?}", p.display(), dims, s))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Loads frame `i` resized to `target = (height, width)`: bilinear for RGB,
/// nearest-neighbor for depth and mask.
pub fn get_sample(index: &DatasetIndex, i: usize, target: (usize, usize)) -> Result<Sample> {
    let e = index.entries.get(i).ok_or_else(|| {
        FdctError::Input(format!(
            "sample {i} out of range for {} entries",
            index.len()
        ))
    })?;
    let rgb = png::read_rgb(&e.rgb)?;
    let raw = png::read_depth(&e.depth)?;
    let gt = png::read_depth(&e.gt)?;
    let mask = png::read_mask(&e.mask)?;
    Sample::new(
        e.id.clone(),
        resize_bilinear(&rgb, target),
        resize_depth_nearest(&raw, target),
        resize_depth_nearest(&gt, target),
        resize_mask_nearest(&mask, target),
    )
}

/// Source index of output cell `i` under nearest-neighbor resampling.
#[inline]
fn nearest(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

pub fn resize_depth_nearest(d: &DepthMap, (h, w): (usize, usize)) -> DepthMap {
    if d.shape() == (h, w) {
        return d.clone();
    }
    let (sh, sw) = d.shape();
    DepthMap::from_fn(h, w, |r, c| d.get(nearest(r, sh, h), nearest(c, sw, w)))
}

pub fn resize_mask_nearest(m: &TransparentMask, (h, w): (usize, usize)) -> TransparentMask {
    if m.shape() == (h, w) {
        return m.clone();
    }
    let (sh, sw) = m.shape();
    TransparentMask::from_fn(h, w, |r, c| m.get(nearest(r, sh, h), nearest(c, sw, w)))
}

/// Half-pixel-centred bilinear resampling.
pub fn resize_bilinear(img: &RgbImage, (h, w): (usize, usize)) -> RgbImage {
    if img.shape() == (h, w) {
        return img.clone();
    }
    let (sh, sw) = img.shape();
    let axis = |i: usize, src: usize, dst: usize| {
        let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let mut values = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        let (r0, r1, fy) = axis(r, sh, h);
        for c in 0..w {
            let (c0, c1, fx) = axis(c, sw, w);
            let (a, b) = (img.get(r0, c0), img.get(r0, c1));
            let (p, q) = (img.get(r1, c0), img.get(r1, c1));
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = p[k] + (q[k] - p[k]) * fx;
                values.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    RgbImage::new(h, w, values).expect("bilinear output stays in range")
}
