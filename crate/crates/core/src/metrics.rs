//! Mask overlap and prompt placement metrics.

use std::f64::consts::TAU;

use crate::error::{FobError, Result};
use crate::geometry::{BinaryMask, Point2D};

/// `2|a & b| / (|a| + |b|)`, 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(FobError::Shape(format!("dice over {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (a, b) = (pred.count(), gt.count());
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.and(gt).count() as f64 / (a + b) as f64)
}

/// Euclidean distance from arbitrary points to the nearest boundary pixel
/// of a mask.
#[derive(Clone, Debug)]
pub struct BoundaryDistance {
    boundary: Vec<Point2D>,
}

impl BoundaryDistance {
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        let boundary: Vec<Point2D> =
            mask.boundary().pixels().into_iter().map(|(r, c)| Point2D::new(r as f64, c as f64)).collect();
        if boundary.is_empty() {
            return Err(FobError::EmptyMask);
        }
        Ok(Self { boundary })
    }

    pub fn distance(&self, p: &Point2D) -> f64 {
        self.boundary.iter().map(|b| b.distance(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self, points: &[Point2D]) -> Option<f64> {
        (!points.is_empty()).then(|| points.iter().map(|p| self.distance(p)).sum::<f64>() / points.len() as f64)
    }
}

/// Fraction of points whose nearest pixel lies inside `mask`.
pub fn fraction_inside(points: &[Point2D], mask: &BinaryMask) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let (h, w) = mask.dims();
    let n = points.iter().filter(|p| {
        let (r, c) = p.pixel(h, w);
        mask.get(r, c)
    });
    Some(n.count() as f64 / points.len() as f64)
}

/// Ellipse with centre, semi-axes and orientation of the major axis
/// (angle from +col toward +row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: Point2D,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Moment fit to points spread along a closed curve: for points
    /// uniform on an ellipse the covariance eigenvalues are `a^2/2`, `b^2/2`
    /// (exact for circles).
    pub fn fit(points: &[Point2D]) -> Result<Ellipse> {
        if points.len() < 3 {
            return Err(FobError::InvalidParameter("ellipse fit needs at least 3 points".into()));
        }
        let n = points.len() as f64;
        let (mr, mc) = points.iter().fold((0.0, 0.0), |(r, c), p| (r + p.row, c + p.col));
        let (mr, mc) = (mr / n, mc / n);
        let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
        for p in points {
            let (dr, dc) = (p.row - mr, p.col - mc);
            srr += dr * dr;
            scc += dc * dc;
            src += dr * dc;
        }
        let (srr, scc, src) = (srr / n, scc / n, src / n);
        let tr = srr + scc;
        let disc = (((scc - srr) / 2.0).powi(2) + src * src).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, (tr / 2.0 - disc).max(0.0));
        // major-axis direction (dc, dr) for eigenvalue l1
        let angle = if src.abs() < 1e-15 && scc >= srr { 0.0 } else { (l1 - scc).atan2(src) };
        let angle = if src.abs() < 1e-15 && srr > scc { TAU / 4.0 } else { angle };
        Ok(Ellipse { center: Point2D::new(mr, mc), a: (2.0 * l1).sqrt(), b: (2.0 * l2).sqrt(), angle })
    }

    pub fn point_at(&self, t: f64) -> Point2D {
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (self.a * t.cos(), self.b * t.sin());
        Point2D::new(self.center.row + x * s + y * c, self.center.col + x * c - y * s)
    }

    /// Distance to the curve: dense sampling, then a ternary search around
    /// the closest sample.
    pub fn distance(&self, p: &Point2D) -> f64 {
        const STEPS: usize = 720;
        let step = TAU / STEPS as f64;
        let d = |t: f64| self.point_at(t).distance(p);
        let best = (0..STEPS).map(|i| i as f64 * step).min_by(|a, b| d(*a).total_cmp(&d(*b))).expect("steps");
        let (mut lo, mut hi) = (best - step, best + step);
        for _ in 0..60 {
            let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if d(m1) < d(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        d(0.5 * (lo + hi)).min(d(best))
    }

    pub fn mean_squared_residual(&self, points: &[Point2D]) -> Option<f64> {
        (!points.is_empty()).then(|| points.iter().map(|p| self.distance(p).powi(2)).sum::<f64>() / points.len() as f64)
    }
}
