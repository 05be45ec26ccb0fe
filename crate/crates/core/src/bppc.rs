//! Background prompt prototype construction.
//!
//! Support background prompts are drawn from the band between two dilations
//! of the support mask, each prompt is turned into a Gaussian weighting map,
//! and features are pooled under those maps. The foreground prototype pools
//! under the binary support mask itself.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FobError, Result};
use crate::geometry::{differential_ring, gaussian_stack, sample_points_around, BinaryMask, FeatureMap, Heatmap, Point2D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BppcConfig {
    /// Outer dilation size (odd).
    pub r: usize,
    /// Band width between the two dilations (even).
    pub eps: usize,
    pub n_prompts: usize,
    pub sigma: f64,
}

impl Default for BppcConfig {
    fn default() -> Self {
        Self { r: 15, eps: 2, n_prompts: 10, sigma: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `N_p x C`, row `i` pooled around `source_points[i]`.
    pub background: Array2<f64>,
    pub foreground: Array1<f64>,
    pub source_points: Vec<Point2D>,
}

/// `sum F(u,v) w(u,v) / sum w(u,v)`.
pub fn masked_average_pool(feat: &FeatureMap, weights: &Heatmap) -> Result<Vec<f64>> {
    if (weights.h, weights.w) != (feat.h, feat.w) {
        return Err(FobError::Shape(format!(
            "weights {}x{} vs features {}x{}",
            weights.h, weights.w, feat.h, feat.w
        )));
    }
    if weights.data.iter().any(|&w| w < 0.0) {
        return Err(FobError::InvalidParameter("pooling weights must be nonnegative".into()));
    }
    let total: f64 = weights.data.iter().sum();
    if total <= 0.0 {
        return Err(FobError::ZeroWeight);
    }
    let mut acc = vec![0.0; feat.channels()];
    for (i, &w) in weights.data.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (a, f) in acc.iter_mut().zip(feat.data.row(i)) {
            *a += w * f;
        }
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Divides each row of a weight stack by its sum, so pooling becomes one
/// matrix product `weights . F`.
pub fn normalize_rows(weights: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = weights.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s <= 0.0 {
            return Err(FobError::ZeroWeight);
        }
        row /= s;
    }
    Ok(out)
}

/// Normalised Gaussian pooling weights for a list of points, `N x (H*W)`.
pub fn point_pooling_weights(points: &[Point2D], sigma: f64, h: usize, w: usize) -> Result<Array2<f64>> {
    normalize_rows(&gaussian_stack(points, sigma, h, w)?)
}

/// Normalised binary-mask pooling weights, `1 x (H*W)`.
pub fn mask_pooling_weights(mask: &BinaryMask) -> Result<Array2<f64>> {
    let w = Array2::from_shape_vec((1, mask.as_slice().len()), mask.to_f64()).expect("mask row");
    normalize_rows(&w)
}

/// Pools on the tape with fixed (already normalised) weights.
pub fn pool(t: &mut Tape, feat: Var, weights: &Array2<f64>) -> Var {
    let wv = t.constant(weights.clone());
    t.matmul(wv, feat)
}

/// Gaussian-weighted prototypes for `points` (eval path, no tape).
pub fn pool_points(feat: &FeatureMap, points: &[Point2D], sigma: f64) -> Result<Array2<f64>> {
    Ok(point_pooling_weights(points, sigma, feat.h, feat.w)?.dot(&feat.data))
}

/// Support background prompts: sampled from the differential ring and
/// ordered around the foreground centroid.
pub fn support_prompts(mask: &BinaryMask, cfg: &BppcConfig, seed: u64) -> Result<Vec<Point2D>> {
    let anchor = mask.centroid().ok_or(FobError::EmptyMask)?;
    let ring = differential_ring(mask, cfg.r, cfg.eps)?;
    if ring.is_empty() {
        return Err(FobError::EmptyRing);
    }
    sample_points_around(&ring, cfg.n_prompts, seed, anchor)
}

pub fn build_prototypes(
    feat_s: &FeatureMap,
    mask_s: &BinaryMask,
    cfg: &BppcConfig,
    seed: u64,
) -> Result<PrototypeSet> {
    if mask_s.dims() != (feat_s.h, feat_s.w) {
        return Err(FobError::Shape("support mask and features differ in size".into()));
    }
    let points = support_prompts(mask_s, cfg, seed)?;
    let background = pool_points(feat_s, &points, cfg.sigma)?;
    let fg = mask_pooling_weights(mask_s)?.dot(&feat_s.data);
    Ok(PrototypeSet { background, foreground: fg.row(0).to_owned(), source_points: points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, Array2::from_shape_fn((h * w, c), |(i, j)| 10.0 + 0.01 * ((i / w) + (i % w)) as f64 + j as f64))
    }

    #[test]
    fn map_fixtures() {
        let f = FeatureMap::new(1, 2, Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap());
        let w = Heatmap::new(1, 2, vec![1.0, 3.0]);
        assert_eq!(masked_average_pool(&f, &w).unwrap(), vec![2.5]);

        let c = FeatureMap::new(3, 3, Array2::from_elem((9, 2), 0.7));
        let w = Heatmap::new(3, 3, (0..9).map(|i| i as f64 * 0.3 + 0.1).collect());
        for v in masked_average_pool(&c, &w).unwrap() {
            assert_relative_eq!(v, 0.7, epsilon = 1e-12);
        }

        let f = ramp(4, 5, 3);
        let mut delta = Heatmap::constant(4, 5, 0.0);
        delta.data[2 * 5 + 3] = 1.0;
        assert_eq!(masked_average_pool(&f, &delta).unwrap(), f.at(2, 3).to_vec());
    }

    #[test]
    fn zero_weights_error() {
        let f = ramp(2, 2, 1);
        assert!(matches!(masked_average_pool(&f, &Heatmap::constant(2, 2, 0.0)), Err(FobError::ZeroWeight)));
    }

    #[test]
    fn constant_features_give_equal_prototypes() {
        let feat = FeatureMap::new(40, 40, Array2::from_elem((1600, 4), 1.25));
        let mask = BinaryMask::from_fn(40, 40, |r, c| (15..25).contains(&r) && (14..26).contains(&c));
        let p = build_prototypes(&feat, &mask, &BppcConfig::default(), 5).unwrap();
        assert_eq!(p.background.nrows(), 10);
        assert_eq!(p.source_points.len(), 10);
        for row in p.background.rows() {
            for (a, b) in row.iter().zip(p.foreground.iter()) {
                assert_relative_eq!(*a, *b, epsilon = 1e-12);
                assert_relative_eq!(*a, 1.25, epsilon = 1e-12);
            }
        }
        assert_eq!(build_prototypes(&feat, &mask, &BppcConfig::default(), 5).unwrap(), p);
    }

    #[test]
    fn single_point_prototype_close_to_pixel_feature() {
        // smooth features on a 64x64 grid; the Gaussian pool should stay within 5% of the centre value
        let feat = ramp(64, 64, 2);
        let pt = Point2D::new(20.0, 41.0);
        let proto = pool_points(&feat, &[pt], 4.0).unwrap();
        for (a, b) in proto.row(0).iter().zip(feat.at(20, 41).iter()) {
            assert!((a - b).abs() / b.abs() < 0.05);
        }
    }

    #[test]
    fn support_prompts_lie_on_ring() {
        let mask = BinaryMask::from_fn(64, 64, |r, c| (r as f64 - 32.0).hypot(c as f64 - 30.0) < 9.0);
        let cfg = BppcConfig::default();
        let ring = differential_ring(&mask, cfg.r, cfg.eps).unwrap();
        let pts = support_prompts(&mask, &cfg, 9).unwrap();
        for p in &pts {
            assert!(ring.get(p.row as usize, p.col as usize));
        }
    }
}
