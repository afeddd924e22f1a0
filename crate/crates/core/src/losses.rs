//! Composite training objective: Huber depth term, global SSIM structural
//! term and normal-cosine smoothness term, all restricted to the valid
//! transparent pixels, with optional edge-aware Huber weighting.
//!
//! Every term comes with its exact gradient with respect to the prediction,
//! which seeds back-propagation through the network.

use serde::{Deserialize, Serialize};

use crate::depth::{
    depth_gradients, normals_from_depth, valid_pixels, DepthMap, TransparentMask, ValidRange,
};
use crate::error::{FdctError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Huber threshold in meters.
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Floor on the normal-norm product.
    pub epsilon: f64,
    pub c1: f64,
    pub c2: f64,
    pub edge_weighting: bool,
    pub edge_blur_sigma: f64,
}

impl LossConfig {
    /// SSIM constants `(0.01 R)^2` and `(0.03 R)^2` with `R` the upper end of
    /// the valid depth range.
    pub fn for_range(range: ValidRange) -> Self {
        Self {
            delta: 0.1,
            alpha: 0.1,
            beta: 0.001,
            epsilon: 1e-8,
            c1: (0.01 * range.hi).powi(2),
            c2: (0.03 * range.hi).powi(2),
            edge_weighting: false,
            edge_blur_sigma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.delta > 0.0, "delta must be > 0"),
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (self.epsilon > 0.0, "epsilon must be > 0"),
            (self.c1 > 0.0, "c1 must be > 0"),
            (self.c2 > 0.0, "c2 must be > 0"),
            (
                !self.edge_weighting || self.edge_blur_sigma > 0.0,
                "edge_blur_sigma must be > 0",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(FdctError::Config(msg.into()));
            }
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_range(ValidRange::default())
    }
}

/// Loss components of one sample (or the mean over a batch).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub huber: f64,
    /// `1 - SSIM`.
    pub ssim_term: f64,
    pub smooth: f64,
    pub valid_pixel_count: usize,
    /// False when no pixel was valid and the sample contributed nothing.
    pub active: bool,
}

fn check_shapes(pred: &DepthMap, gt: &DepthMap, valid: &TransparentMask) -> Result<()> {
    if pred.shape() != gt.shape() || gt.shape() != valid.shape() {
        return Err(FdctError::Dimension(format!(
            "pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            valid.shape()
        )));
    }
    Ok(())
}

#[inline]
fn huber_point(e: f64, delta: f64) -> (f64, f64) {
    if e.abs() <= delta {
        (0.5 * e * e, e)
    } else {
        (delta * e.abs() - 0.5 * delta * delta, delta * e.signum())
    }
}

/// Mean Huber penalty over the valid pixels; 0 for an empty set.
pub fn huber_loss(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &TransparentMask,
    delta: f64,
) -> Result<f64> {
    check_shapes(pred, gt, valid)?;
    Ok(huber_terms(pred, gt, valid, delta, None, None))
}

fn huber_terms(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &TransparentMask,
    delta: f64,
    weights: Option<&[f64]>,
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = valid.count();
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for (i, &v) in valid.values().iter().enumerate() {
        if !v {
            continue;
        }
        let w = weights.map_or(1.0, |w| w[i]);
        let (h, dh) = huber_point(pred.values()[i] - gt.values()[i], delta);
        sum += w * h;
        if let Some(g) = grad.as_deref_mut() {
            g[i] += w * dh * inv;
        }
    }
    sum * inv
}

/// Global statistics of the valid pixels (population moments).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimStats {
    pub mu_p: f64,
    pub mu_g: f64,
    pub var_p: f64,
    pub var_g: f64,
    pub cov: f64,
    pub n: usize,
}

fn ssim_stats(pred: &DepthMap, gt: &DepthMap, valid: &TransparentMask) -> SsimStats {
    let (mut n, mut sp, mut sg) = (0usize, 0.0, 0.0);
    for ((p, g), v) in pred.values().iter().zip(gt.values()).zip(valid.values()) {
        if *v {
            n += 1;
            sp += p;
            sg += g;
        }
    }
    let nf = n.max(1) as f64;
    let (mu_p, mu_g) = (sp / nf, sg / nf);
    let (mut vp, mut vg, mut cv) = (0.0, 0.0, 0.0);
    for ((p, g), v) in pred.values().iter().zip(gt.values()).zip(valid.values()) {
        if *v {
            let (dp, dg) = (p - mu_p, g - mu_g);
            vp += dp * dp;
            vg += dg * dg;
            cv += dp * dg;
        }
    }
    SsimStats {
        mu_p,
        mu_g,
        var_p: vp / nf,
        var_g: vg / nf,
        cov: cv / nf,
        n,
    }
}

/// Single-window SSIM index over the valid pixels; `None` with fewer than two.
pub fn ssim(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &TransparentMask,
    c1: f64,
    c2: f64,
) -> Result<Option<f64>> {
    check_shapes(pred, gt, valid)?;
    Ok(ssim_terms(pred, gt, valid, c1, c2, None))
}

fn ssim_terms(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &TransparentMask,
    c1: f64,
    c2: f64,
    grad_scale: Option<(f64, &mut [f64])>,
) -> Option<f64> {
    let st = ssim_stats(pred, gt, valid);
    if st.n < 2 {
        return None;
    }
    let a = 2.0 * st.cov + c2;
    let b = 2.0 * st.mu_g * st.mu_p + c1;
    let c = st.var_g + st.var_p + c2;
    let d = st.mu_g * st.mu_g + st.mu_p * st.mu_p + c1;
    let s = (a * b) / (c * d);
    if let Some((scale, grad)) = grad_scale {
        // dS/dp_i = S (2 dcov / A + 2 mu_g dmu / B - dvar_p / C - 2 mu_p dmu / D)
        let inv_n = 1.0 / st.n as f64;
        let common = 2.0 * st.mu_g / b - 2.0 * st.mu_p / d;
        for (i, &v) in valid.values().iter().enumerate() {
            if !v {
                continue;
            }
            let dp = pred.values()[i] - st.mu_p;
            let dg = gt.values()[i] - st.mu_g;
            let ds = s * inv_n * (2.0 * dg / a + common - 2.0 * dp / c);
            grad[i] += scale * ds;
        }
    }
    Some(s)
}

/// Mean `1 - cos` between predicted and ground-truth normals over the valid
/// pixels. Normals come from the full maps, so pixels on the mask border see
/// their true neighbours.
pub fn smooth_loss(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &TransparentMask,
    epsilon: f64,
) -> Result<f64> {
    check_shapes(pred, gt, valid)?;
    Ok(smooth_terms(pred, gt, valid, epsilon, None))
}

fn smooth_terms(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &TransparentMask,
    epsilon: f64,
    grad_scale: Option<(f64, &mut [f64])>,
) -> f64 {
    let n = valid.count();
    if n == 0 {
        return 0.0;
    }
    let (h, w) = pred.shape();
    let np = normals_from_depth(pred);
    let ng = normals_from_depth(gt);
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    // per-pixel dL/dgx, dL/dgy, scattered through the difference stencil below
    let mut dgx = vec![0.0; h * w];
    let mut dgy = vec![0.0; h * w];
    let (gx, gy) = depth_gradients(pred);
    for (i, &v) in valid.values().iter().enumerate() {
        if !v {
            continue;
        }
        let (p, g) = (np.normals[i], ng.normals[i]);
        let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
        let norm_p = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let norm_g = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        let denom = (norm_p * norm_g).max(epsilon);
        // rounding can push the unit-vector cosine just past 1
        sum += 1.0 - (dot / denom).clamp(-1.0, 1.0);

        if grad_scale.is_some() {
            let u = [-gx[i], -gy[i], 1.0];
            let len_u = (u[0] * u[0] + u[1] * u[1] + 1.0).sqrt();
            let uh = [u[0] / len_u, u[1] / len_u, u[2] / len_u];
            let dl_du: [f64; 3] = if norm_p * norm_g >= epsilon {
                // L = 1 - cos(u, g)
                let gh = [g[0] / norm_g, g[1] / norm_g, g[2] / norm_g];
                let cos = uh[0] * gh[0] + uh[1] * gh[1] + uh[2] * gh[2];
                [0, 1, 2].map(|k| -(gh[k] - cos * uh[k]) / len_u)
            } else {
                // L = 1 - (u / |u|) . g / eps
                let ug = uh[0] * g[0] + uh[1] * g[1] + uh[2] * g[2];
                [0, 1, 2].map(|k| -(g[k] - ug * uh[k]) / (len_u * epsilon))
            };
            dgx[i] = -dl_du[0] * inv;
            dgy[i] = -dl_du[1] * inv;
        }
    }
    if let Some((scale, grad)) = grad_scale {
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                scatter_diff(w, c, dgx[i] * scale, |j, v| grad[r * w + j] += v);
                scatter_diff(h, r, dgy[i] * scale, |j, v| grad[j * w + c] += v);
            }
        }
    }
    sum * inv
}

/// Adjoint of the one-axis difference stencil used for normals.
fn scatter_diff(len: usize, i: usize, g: f64, mut add: impl FnMut(usize, f64)) {
    if g == 0.0 || len < 2 {
        return;
    }
    if i == 0 {
        add(1, g);
        add(0, -g);
    } else if i == len - 1 {
        add(len - 1, g);
        add(len - 2, -g);
    } else {
        add(i + 1, 0.5 * g);
        add(i - 1, -0.5 * g);
    }
}

/// Gaussian-blurred gradient magnitude of `gt` (kernel radius `ceil(3 sigma)`,
/// mirrored borders).
pub fn edge_weight_map(gt: &DepthMap, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FdctError::Config(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    let (h, w) = gt.shape();
    let (gx, gy) = depth_gradients(gt);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(x, y)| (x * x + y * y).sqrt())
        .collect();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    // separable: rows then columns
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * mag[r * w + reflect(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index into `[0, len)` without repeating the edge sample
/// (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-pixel Huber weights `1 / (1 + edge)` rescaled to mean 1 over `valid`.
fn edge_weights(gt: &DepthMap, valid: &TransparentMask, sigma: f64) -> Result<Vec<f64>> {
    let edges = edge_weight_map(gt, sigma)?;
    let mut w: Vec<f64> = edges.iter().map(|e| 1.0 / (1.0 + e)).collect();
    let n = valid.count();
    if n > 0 {
        let mean = w
            .iter()
            .zip(valid.values())
            .filter(|(_, v)| **v)
            .map(|(x, _)| *x)
            .sum::<f64>()
            / n as f64;
        for x in &mut w {
            *x /= mean;
        }
    }
    Ok(w)
}

/// Loss bundle for one prediction.
pub fn total_loss(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &TransparentMask,
    range: ValidRange,
    cfg: &LossConfig,
) -> Result<LossBundle> {
    Ok(total_loss_impl(pred, gt, mask, range, cfg, false)?.0)
}

/// Loss bundle plus its gradient with respect to every pixel of `pred`.
pub fn total_loss_with_grad(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &TransparentMask,
    range: ValidRange,
    cfg: &LossConfig,
) -> Result<(LossBundle, Vec<f64>)> {
    let (bundle, grad) = total_loss_impl(pred, gt, mask, range, cfg, true)?;
    Ok((bundle, grad.expect("gradient requested")))
}

fn total_loss_impl(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &TransparentMask,
    range: ValidRange,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBundle, Option<Vec<f64>>)> {
    cfg.validate()?;
    check_shapes(pred, gt, mask)?;
    let valid = valid_pixels(gt, mask, range)?;
    let n = valid.count();
    let mut grad = want_grad.then(|| vec![0.0; pred.values().len()]);
    if n == 0 {
        return Ok((LossBundle::default(), grad));
    }
    let weights = if cfg.edge_weighting {
        Some(edge_weights(gt, &valid, cfg.edge_blur_sigma)?)
    } else {
        None
    };
    let huber = huber_terms(
        pred,
        gt,
        &valid,
        cfg.delta,
        weights.as_deref(),
        grad.as_deref_mut(),
    );
    let ssim_index = ssim_terms(
        pred,
        gt,
        &valid,
        cfg.c1,
        cfg.c2,
        grad.as_deref_mut().map(|g| (-cfg.alpha, g)),
    );
    let ssim_term = ssim_index.map_or(0.0, |s| 1.0 - s);
    let smooth = smooth_terms(
        pred,
        gt,
        &valid,
        cfg.epsilon,
        grad.as_deref_mut().map(|g| (cfg.beta, g)),
    );
    let bundle = LossBundle {
        total: huber + cfg.alpha * ssim_term + cfg.beta * smooth,
        huber,
        ssim_term,
        smooth,
        valid_pixel_count: n,
        active: true,
    };
    Ok((bundle, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn offset_pair(e: f64) -> (DepthMap, DepthMap, TransparentMask) {
        let gt = DepthMap::from_fn(4, 4, |r, c| 0.8 + 0.01 * (r + c) as f64);
        let pred = DepthMap::from_fn(4, 4, |r, c| gt.get(r, c) + e);
        (pred, gt, TransparentMask::filled(4, 4, true))
    }

    #[test]
    fn huber_landmarks() {
        for (e, expected) in [(0.05, 0.00125), (0.2, 0.015), (0.1, 0.005), (-0.2, 0.015)] {
            let (p, g, m) = offset_pair(e);
            let got = huber_loss(&p, &g, &m, 0.1).unwrap();
            assert!((got - expected).abs() < 1e-12, "e={e}: {got}");
        }
        // both branch formulas agree at |e| = delta
        let (q, l) = (0.5 * 0.1f64 * 0.1, 0.1 * 0.1 - 0.5 * 0.1 * 0.1);
        assert!((q - l).abs() < 1e-15);
    }

    #[test]
    fn huber_empty_valid_set_is_zero() {
        let (p, g, _) = offset_pair(0.3);
        let none = TransparentMask::filled(4, 4, false);
        assert_eq!(huber_loss(&p, &g, &none, 0.1).unwrap(), 0.0);
        let b = total_loss(&p, &g, &none, ValidRange::default(), &LossConfig::default()).unwrap();
        assert!(!b.active);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn ssim_identities() {
        let (_, g, m) = offset_pair(0.0);
        let s = ssim(&g, &g, &m, 1e-4, 9e-4).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let flat = DepthMap::filled(4, 4, 0.9);
        let s = ssim(&flat, &flat, &m, 1e-4, 9e-4).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let one = TransparentMask::from_fn(4, 4, |r, c| r == 0 && c == 0);
        assert_eq!(ssim(&g, &flat, &one, 1e-4, 9e-4).unwrap(), None);
    }

    #[test]
    fn smooth_examples() {
        let (p, g, m) = offset_pair(0.0);
        assert_eq!(smooth_loss(&p, &g, &m, 1e-8).unwrap(), 0.0);
        let (p, g, m) = offset_pair(0.37);
        assert!(smooth_loss(&p, &g, &m, 1e-8).unwrap().abs() < 1e-15);

        let ramp = DepthMap::from_fn(6, 6, |_, c| c as f64);
        let flat = DepthMap::filled(6, 6, 1.0);
        let interior =
            TransparentMask::from_fn(6, 6, |r, c| (1..5).contains(&r) && (1..5).contains(&c));
        let l = smooth_loss(&ramp, &flat, &interior, 1e-8).unwrap();
        assert!((l - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn weight_zeroing_leaves_huber() {
        let (p, g, m) = offset_pair(0.07);
        let cfg = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&p, &g, &m, ValidRange::default(), &cfg).unwrap();
        assert_eq!(b.total, b.huber);
    }

    #[test]
    fn edge_map_of_constant_is_zero() {
        let d = DepthMap::filled(8, 8, 1.2);
        assert!(edge_weight_map(&d, 1.5).unwrap().iter().all(|v| *v == 0.0));
        assert!(edge_weight_map(&d, 0.0).is_err());
    }

    #[test]
    fn edge_map_is_symmetric_about_a_step() {
        // step between columns 4 and 5 of a 10-wide map: mirror c <-> 9 - c
        let d = DepthMap::from_fn(6, 10, |_, c| if c < 5 { 0.5 } else { 1.0 });
        let m = edge_weight_map(&d, 1.0).unwrap();
        for r in 0..6 {
            for c in 0..10 {
                assert!((m[r * 10 + c] - m[r * 10 + 9 - c]).abs() < 1e-12);
            }
            assert!(m[r * 10 + 4] > m[r * 10 + 1]);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn rejects_invalid_config() {
        let (p, g, m) = offset_pair(0.1);
        let cfg = LossConfig {
            delta: 0.0,
            ..LossConfig::default()
        };
        assert!(matches!(
            total_loss(&p, &g, &m, ValidRange::default(), &cfg),
            Err(FdctError::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn huber_is_even_and_ssim_symmetric(
            a in proptest::collection::vec(0.3f64..1.5, 16),
            b in proptest::collection::vec(0.3f64..1.5, 16),
        ) {
            let p = DepthMap::new(4, 4, a).unwrap();
            let g = DepthMap::new(4, 4, b).unwrap();
            let m = TransparentMask::filled(4, 4, true);
            let h1 = huber_loss(&p, &g, &m, 0.1).unwrap();
            let h2 = huber_loss(&g, &p, &m, 0.1).unwrap();
            prop_assert!((h1 - h2).abs() < 1e-15);
            let s1 = ssim(&p, &g, &m, 1e-4, 9e-4).unwrap().unwrap();
            let s2 = ssim(&g, &p, &m, 1e-4, 9e-4).unwrap().unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
            let sm = smooth_loss(&p, &g, &m, 1e-8).unwrap();
            prop_assert!((0.0..=2.0).contains(&sm));
            let bundle = total_loss(&p, &g, &m, ValidRange::default(), &LossConfig::default()).unwrap();
            prop_assert!(bundle.huber >= 0.0 && bundle.ssim_term >= 0.0 && bundle.smooth >= 0.0);
            prop_assert!((bundle.total - (bundle.huber + 0.1 * bundle.ssim_term + 0.001 * bundle.smooth)).abs() < 1e-12);
        }
    }
}
