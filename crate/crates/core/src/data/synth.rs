//! Seeded synthetic transparent scenes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{DEPTH_DIR, GT_DIR, MASK_DIR, RGB_DIR};
use super::png;
use crate::depth::{depth_gradients, DepthMap, RgbImage, Sample, TransparentMask};
use crate::error::{FdctError, Result};

pub const GT_MIN: f64 = 0.35;
pub const GT_MAX: f64 = 1.45;
pub const MANIFEST_FILE: &str = "spec.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub height: usize,
    pub width: usize,
    pub base_depth: f64,
    pub n_bumps: usize,
    pub n_transparent_regions: usize,
    pub dropout_prob: f64,
    pub noise_std: f64,
    /// Upper bound of the per-region depth offset; each region draws an
    /// offset in `[0.5, 1] * region_offset`, pushing raw depth farther away.
    pub region_offset: f64,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            height: 160,
            width: 224,
            base_depth: 0.9,
            n_bumps: 4,
            n_transparent_regions: 2,
            dropout_prob: 0.3,
            noise_std: 0.01,
            region_offset: 0.05,
            seed: 0,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(FdctError::Config(format!(
                "scene size {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(FdctError::Config(format!(
                "dropout_prob {} not in [0, 1]",
                self.dropout_prob
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(FdctError::Config(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        if !(self.region_offset >= 0.0 && self.region_offset.is_finite()) {
            return Err(FdctError::Config(format!(
                "region_offset {} must be >= 0",
                self.region_offset
            )));
        }
        if !self.base_depth.is_finite() {
            return Err(FdctError::Config("base_depth must be finite".into()));
        }
        Ok(())
    }

    /// Spec of scene `i` in a generated set.
    pub fn for_scene(&self, i: usize) -> Self {
        Self {
            seed: scene_seed(self.seed, i),
            ..self.clone()
        }
    }
}

pub fn scene_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng.random()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

pub fn generate_scene(spec: &SynthSceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let tilt_x: f64 = rng.random_range(-0.15..0.15);
    let tilt_y: f64 = rng.random_range(-0.15..0.15);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..spec.n_bumps)
        .map(|_| {
            (
                rng.random_range(0.0..hf),
                rng.random_range(0.0..wf),
                rng.random_range(0.08..0.3) * side,
                rng.random_range(-0.3..0.3),
            )
        })
        .collect();
    let gt = DepthMap::from_fn(h, w, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let mut d = spec.base_depth + tilt_x * (x / wf - 0.5) + tilt_y * (y / hf - 0.5);
        for &(cy, cx, s, amp) in &bumps {
            let q = ((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s);
            d += amp * (-q).exp();
        }
        d.clamp(GT_MIN, GT_MAX)
    });

    let regions: Vec<(Ellipse, f64)> = (0..spec.n_transparent_regions)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let e = Ellipse {
                cy: rng.random_range(0.15..0.85) * hf,
                cx: rng.random_range(0.15..0.85) * wf,
                a: rng.random_range(0.1..0.3) * side,
                b: rng.random_range(0.1..0.3) * side,
                cos: theta.cos(),
                sin: theta.sin(),
            };
            (e, rng.random_range(0.5..=1.0) * spec.region_offset)
        })
        .collect();
    // last covering ellipse wins
    let label: Vec<Option<usize>> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            regions.iter().rposition(|(e, _)| e.contains(r, c))
        })
        .collect();
    let mask = TransparentMask::from_fn(h, w, |r, c| label[r * w + c].is_some());

    let mut raw = gt.values().to_vec();
    for (i, region) in label.iter().enumerate() {
        let Some(k) = region else { continue };
        let drop: f64 = rng.random();
        let noise: f64 = rng.sample(StandardNormal);
        raw[i] = if drop < spec.dropout_prob {
            0.0
        } else {
            (raw[i] + spec.noise_std * noise + regions[*k].1).max(0.0)
        };
    }
    let raw = DepthMap::new(h, w, raw)?;

    let albedo: [f64; 3] = [
        rng.random_range(0.35..0.75),
        rng.random_range(0.35..0.75),
        rng.random_range(0.35..0.75),
    ];
    let rgb = render(&gt, &mask, &label, albedo);
    Sample::new(format!("synth_{:016x}", spec.seed), rgb, raw, gt, mask)
}

/// Lambertian shading of `gt` with a fixed light, tinted inside transparent
/// regions and brightened along region boundaries.
fn render(
    gt: &DepthMap,
    mask: &TransparentMask,
    label: &[Option<usize>],
    albedo: [f64; 3],
) -> RgbImage {
    const RELIEF: f64 = 40.0;
    let (h, w) = gt.shape();
    let (gx, gy) = depth_gradients(gt);
    let light = {
        let l = [-0.4f64, -0.5, 0.77];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let mut values = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let n = [-RELIEF * gx[i], -RELIEF * gy[i], 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let shade = ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / len).max(0.0);
            let boundary = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)]
                .iter()
                .any(|(dr, dc)| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    rr >= 0
                        && cc >= 0
                        && (rr as usize) < h
                        && (cc as usize) < w
                        && label[rr as usize * w + cc as usize] != label[i]
                });
            for k in 0..3 {
                let base = albedo[k] * (0.3 + 0.7 * shade);
                let v = if boundary {
                    0.95
                } else if mask.values()[i] {
                    0.55 * base + 0.4
                } else {
                    base
                };
                values.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    RgbImage::new(h, w, values).expect("shaded values lie in [0, 1]")
}

/// Generator parameters of a dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub scenes: usize,
    /// Base spec; scene `i` uses seed `scene_seeds[i]`.
    pub spec: SynthSceneSpec,
    pub scene_seeds: Vec<u64>,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<DatasetManifest> {
    let m: DatasetManifest =
        serde_json::from_slice(bytes).map_err(|e| FdctError::Dataset(format!("manifest: {e}")))?;
    if m.version != 1 {
        return Err(FdctError::Dataset(format!(
            "unsupported manifest version {}",
            m.version
        )));
    }
    if m.scene_seeds.len() != m.scenes {
        return Err(FdctError::Dataset(format!(
            "manifest lists {} seeds for {} scenes",
            m.scene_seeds.len(),
            m.scenes
        )));
    }
    m.spec.validate()?;
    Ok(m)
}

/// Writes `scenes` generated scenes as `scene_NNNN/<kind>/0000.png` plus the
/// manifest.
pub fn write_synthetic_dataset(
    out: &Path,
    base: &SynthSceneSpec,
    scenes: usize,
) -> Result<DatasetManifest> {
    base.validate()?;
    std::fs::create_dir_all(out).map_err(|e| FdctError::io(out, e))?;
    let mut seeds = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let spec = base.for_scene(i);
        seeds.push(spec.seed);
        let sample = generate_scene(&spec)?;
        let dir = out.join(format!("scene_{i:04}"));
        for sub in [RGB_DIR, DEPTH_DIR, GT_DIR, MASK_DIR] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| FdctError::io(&p, e))?;
        }
        png::write_rgb(&dir.join(RGB_DIR).join("0000.png"), &sample.rgb)?;
        png::write_depth(&dir.join(DEPTH_DIR).join("0000.png"), &sample.raw_depth)?;
        png::write_depth(&dir.join(GT_DIR).join("0000.png"), &sample.gt_depth)?;
        png::write_mask(&dir.join(MASK_DIR).join("0000.png"), &sample.mask)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        scenes,
        spec: base.clone(),
        scene_seeds: seeds,
    };
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| FdctError::io(&path, e))?;
    Ok(manifest)
}
