//! Masked depth metrics: RMSE, REL, MAE and the δ threshold ratios.
//!
//! Per-sample results are kept as additive [`PixelStats`] so a dataset
//! report pools every valid pixel rather than averaging per-image scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::depth::{valid_pixels, DepthMap, TransparentMask, ValidRange};
use crate::error::Result;

pub const DELTA_THRESHOLDS: [f64; 3] = [1.05, 1.10, 1.25];

/// Sufficient statistics of a valid-pixel set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub pixel_count: usize,
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub sum_rel: f64,
    /// Pixels passing each entry of [`DELTA_THRESHOLDS`].
    pub delta_hits: [usize; 3],
}

impl PixelStats {
    pub fn from_maps(
        pred: &DepthMap,
        gt: &DepthMap,
        mask: &TransparentMask,
        range: ValidRange,
    ) -> Result<Self> {
        let valid = valid_pixels(gt, mask, range)?;
        if pred.shape() != gt.shape() {
            return Err(crate::FdctError::Dimension(format!(
                "pred {:?} vs gt {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut s = Self::default();
        for ((&p, &g), &v) in pred.values().iter().zip(gt.values()).zip(valid.values()) {
            if v {
                s.push(p, g);
            }
        }
        Ok(s)
    }

    /// Adds one pixel; `gt` must be positive.
    pub fn push(&mut self, pred: f64, gt: f64) {
        let e = pred - gt;
        self.pixel_count += 1;
        self.sum_sq += e * e;
        self.sum_abs += e.abs();
        self.sum_rel += e.abs() / gt;
        if pred > 0.0 {
            let ratio = (pred / gt).max(gt / pred);
            for (hit, t) in self.delta_hits.iter_mut().zip(DELTA_THRESHOLDS) {
                if ratio < t {
                    *hit += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &PixelStats) {
        self.pixel_count += other.pixel_count;
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.sum_rel += other.sum_rel;
        for (a, b) in self.delta_hits.iter_mut().zip(other.delta_hits) {
            *a += b;
        }
    }

    pub fn report(&self, sample_count: usize) -> MetricsReport {
        let n = self.pixel_count;
        let mean = |x: f64| (n > 0).then(|| x / n as f64);
        let pct = |k: usize| (n > 0).then(|| 100.0 * self.delta_hits[k] as f64 / n as f64);
        MetricsReport {
            rmse: mean(self.sum_sq).map(f64::sqrt),
            rel: mean(self.sum_rel),
            mae: mean(self.sum_abs),
            delta_105: pct(0),
            delta_110: pct(1),
            delta_125: pct(2),
            pixel_count: n,
            sample_count,
            delta_comparison: "strict".into(),
            aggregation: "pixel-pooled".into(),
        }
    }
}

/// Dataset or single-sample metrics. Undefined values (no valid pixels) are
/// `None` and serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: Option<f64>,
    pub rel: Option<f64>,
    pub mae: Option<f64>,
    pub delta_105: Option<f64>,
    pub delta_110: Option<f64>,
    pub delta_125: Option<f64>,
    pub pixel_count: usize,
    pub sample_count: usize,
    pub delta_comparison: String,
    pub aggregation: String,
}

impl MetricsReport {
    pub fn is_defined(&self) -> bool {
        self.pixel_count > 0
    }

    pub fn table_header() -> String {
        format!(
            "{:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>10}",
            "RMSE", "REL", "MAE", "d1.05", "d1.10", "d1.25", "pixels"
        )
    }

    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>, prec: usize| match v {
            Some(x) => format!("{x:.prec$}"),
            None => "-".to_string(),
        };
        let mut s = String::new();
        let _ = write!(
            s,
            "{:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>10}",
            f(self.rmse, 4),
            f(self.rel, 4),
            f(self.mae, 4),
            f(self.delta_105, 2),
            f(self.delta_110, 2),
            f(self.delta_125, 2),
            self.pixel_count
        );
        s
    }
}

pub fn compute_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &TransparentMask,
    range: ValidRange,
) -> Result<MetricsReport> {
    let stats = PixelStats::from_maps(pred, gt, mask, range)?;
    Ok(stats.report(usize::from(stats.pixel_count > 0)))
}

/// Pools pixels across samples; `sample_count` counts samples that
/// contributed at least one pixel.
pub fn aggregate(stats: &[PixelStats]) -> MetricsReport {
    let mut total = PixelStats::default();
    for s in stats {
        total.merge(s);
    }
    total.report(stats.iter().filter(|s| s.pixel_count > 0).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full(h: usize, w: usize) -> TransparentMask {
        TransparentMask::filled(h, w, true)
    }

    #[test]
    fn exact_prediction() {
        let gt = DepthMap::from_fn(4, 4, |r, c| 0.5 + 0.05 * (r * 4 + c) as f64);
        let r = compute_metrics(&gt, &gt, &full(4, 4), ValidRange::default()).unwrap();
        assert_eq!(r.rmse, Some(0.0));
        assert_eq!(r.rel, Some(0.0));
        assert_eq!(r.mae, Some(0.0));
        assert_eq!([r.delta_105, r.delta_110, r.delta_125], [Some(100.0); 3]);
    }

    #[test]
    fn uniform_ratio_boundary_is_strict() {
        let gt = DepthMap::filled(4, 4, 1.0);
        let pred = DepthMap::filled(4, 4, 1.1);
        let r = compute_metrics(&pred, &gt, &full(4, 4), ValidRange::default()).unwrap();
        assert!((r.rel.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.delta_105, Some(0.0));
        assert_eq!(r.delta_110, Some(0.0));
        assert_eq!(r.delta_125, Some(100.0));
    }

    #[test]
    fn nonpositive_prediction_fails_every_threshold() {
        let gt = DepthMap::filled(2, 2, 1.0);
        let pred = DepthMap::filled(2, 2, 0.0);
        let r = compute_metrics(&pred, &gt, &full(2, 2), ValidRange::default()).unwrap();
        assert_eq!(r.delta_125, Some(0.0));
    }

    #[test]
    fn empty_set_is_undefined() {
        let gt = DepthMap::filled(2, 2, 3.0);
        let r = compute_metrics(&gt, &gt, &full(2, 2), ValidRange::default()).unwrap();
        assert!(!r.is_defined());
        assert_eq!(r.rmse, None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["rmse"].is_null());
        assert!(!aggregate(&[]).is_defined());
    }

    #[test]
    fn aggregate_ignores_empty_samples() {
        let gt = DepthMap::filled(4, 4, 1.0);
        let pred = DepthMap::from_fn(4, 4, |r, c| 1.0 + 0.01 * (r + c) as f64);
        let s = PixelStats::from_maps(&pred, &gt, &full(4, 4), ValidRange::default()).unwrap();
        let empty = PixelStats::default();
        assert_eq!(aggregate(&[s, empty]), aggregate(&[s]));
        let twice = aggregate(&[s, s]);
        let once = aggregate(&[s]);
        assert!((twice.rmse.unwrap() - once.rmse.unwrap()).abs() < 1e-15);
        assert_eq!(twice.delta_105, once.delta_105);
    }

    #[test]
    fn table_row_renders_undefined() {
        let row = aggregate(&[]).table_row();
        assert!(row.contains('-'));
        assert_eq!(MetricsReport::table_header().len(), row.len());
    }

    proptest! {
        #[test]
        fn report_invariants(
            p in proptest::collection::vec(-0.2f64..2.0, 36),
            g in proptest::collection::vec(0.2f64..1.8, 36),
            m in proptest::collection::vec(any::<bool>(), 36),
            scale in 0.1f64..10.0,
        ) {
            let pred = DepthMap::new(6, 6, p.clone()).unwrap();
            let gt = DepthMap::new(6, 6, g.clone()).unwrap();
            let mask = TransparentMask::new(6, 6, m).unwrap();
            let r = compute_metrics(&pred, &gt, &mask, ValidRange::default()).unwrap();
            if r.is_defined() {
                let (a, b, c) = (r.delta_105.unwrap(), r.delta_110.unwrap(), r.delta_125.unwrap());
                prop_assert!(0.0 <= a && a <= b && b <= c && c <= 100.0);
                prop_assert!(r.mae.unwrap() <= r.rmse.unwrap() + 1e-12);

                // unit change: scale everything, including the range
                let range = ValidRange::new(0.3 * scale, 1.5 * scale).unwrap();
                let ps = DepthMap::new(6, 6, p.iter().map(|x| x * scale).collect()).unwrap();
                let gs = DepthMap::new(6, 6, g.iter().map(|x| x * scale).collect()).unwrap();
                let rs = compute_metrics(&ps, &gs, &mask, range).unwrap();
                prop_assert!((rs.rel.unwrap() - r.rel.unwrap()).abs() < 1e-9);
                prop_assert!((rs.rmse.unwrap() - scale * r.rmse.unwrap()).abs() < 1e-9 * scale);
                prop_assert!((rs.mae.unwrap() - scale * r.mae.unwrap()).abs() < 1e-9 * scale);
            }
        }
    }
}
