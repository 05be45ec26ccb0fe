//! Spatial primitives shared by every stage: masks and their morphology,
//! point sampling and ordering, Gaussian heatmaps and bilinear lookup.
//!
//! Coordinates are `(row, col)` in continuous pixel units with the origin at
//! the centre of the top-left pixel.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::BilinearCell;
use crate::error::{FobError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2D {
    pub row: f64,
    pub col: f64,
}

impl Point2D {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        ((self.row - other.row).powi(2) + (self.col - other.col).powi(2)).sqrt()
    }

    pub fn clamped(&self, h: usize, w: usize) -> Point2D {
        Point2D::new(
            self.row.clamp(0.0, (h - 1) as f64),
            self.col.clamp(0.0, (w - 1) as f64),
        )
    }

    /// Nearest pixel, clamped into the grid.
    pub fn pixel(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.clamped(h, w);
        (p.row.round() as usize, p.col.round() as usize)
    }

    pub fn is_finite(&self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }
}

/// A binary mask stored row-major as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1, "mask must be at least 1x1");
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        let mut m = Self::zeros(h, w);
        m.data.fill(1);
        m
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                m.data[r * w + c] = f(r, c) as u8;
            }
        }
        m
    }

    /// Builds a mask from 0/1 values; any other value is rejected.
    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(FobError::Shape(format!("mask data of length {} for {h}x{w}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(FobError::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// `(row, col)` of every set pixel in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / self.w, i % self.w))
            .collect()
    }

    pub fn centroid(&self) -> Option<Point2D> {
        let px = self.pixels();
        if px.is_empty() {
            return None;
        }
        let n = px.len() as f64;
        let (sr, sc) = px.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        Some(Point2D::new(sr / n, sc / n))
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a & (1 - b))
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask { h: self.h, w: self.w, data: self.data.iter().map(|v| 1 - v).collect() }
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        assert_eq!(self.dims(), other.dims(), "mask shapes differ");
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Mask as `0.0/1.0` weights.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Set pixels with at least one 4-neighbour outside the mask (or on the image edge).
    pub fn boundary(&self) -> BinaryMask {
        BinaryMask::from_fn(self.h, self.w, |r, c| {
            if !self.get(r, c) {
                return false;
            }
            let edge = r == 0 || c == 0 || r + 1 == self.h || c + 1 == self.w;
            edge || !self.get(r - 1, c) || !self.get(r + 1, c) || !self.get(r, c - 1) || !self.get(r, c + 1)
        })
    }
}

/// Dense scalar map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "heatmap data length");
        Self { h, w, data }
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }
}

/// `H x W x C` features stored flat as a `(H*W) x C` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Self {
        assert_eq!(data.nrows(), h * w, "feature map rows must equal h*w");
        Self { h, w, data }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn at(&self, r: usize, c: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(r * self.w + c)
    }
}

fn check_odd(r: usize, what: &str) -> Result<()> {
    if r == 0 || r % 2 == 0 {
        return Err(FobError::InvalidParameter(format!("{what} must be an odd integer >= 1, got {r}")));
    }
    Ok(())
}

/// Square `r x r` dilation, clipped at the image border.
pub fn dilate_mask(mask: &BinaryMask, r: usize) -> Result<BinaryMask> {
    check_odd(r, "dilation size")?;
    if mask.is_empty() {
        return Err(FobError::EmptyMask);
    }
    Ok(dilate_unchecked(mask, r))
}

fn dilate_unchecked(mask: &BinaryMask, r: usize) -> BinaryMask {
    let rad = (r / 2) as isize;
    let (h, w) = mask.dims();
    // separable: horizontal pass then vertical pass
    let mut tmp = BinaryMask::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            let lo = (col as isize - rad).max(0) as usize;
            let hi = ((col as isize + rad) as usize).min(w - 1);
            if (lo..=hi).any(|c| mask.get(row, c)) {
                tmp.set(row, col, true);
            }
        }
    }
    let mut out = BinaryMask::zeros(h, w);
    for row in 0..h {
        let lo = (row as isize - rad).max(0) as usize;
        let hi = ((row as isize + rad) as usize).min(h - 1);
        for col in 0..w {
            if (lo..=hi).any(|r2| tmp.get(r2, col)) {
                out.set(row, col, true);
            }
        }
    }
    out
}

/// Square erosion as the complement of dilating the complement. Even sizes
/// are rounded up to the next odd size.
pub fn erode_mask(mask: &BinaryMask, e: usize) -> BinaryMask {
    let size = if e % 2 == 0 { e + 1 } else { e };
    let comp = mask.not();
    if comp.is_empty() {
        return mask.clone();
    }
    dilate_unchecked(&comp, size).not()
}

/// The band `dilate(mask, r) \ dilate(mask, r - eps)`.
///
/// `eps = 0` asks for no band and yields an empty mask; a positive `eps`
/// whose band is empty (the dilations saturate the image) is an error.
pub fn differential_ring(mask: &BinaryMask, r: usize, eps: usize) -> Result<BinaryMask> {
    if eps % 2 != 0 {
        return Err(FobError::InvalidParameter(format!("ring width eps must be even, got {eps}")));
    }
    if eps >= r {
        return Err(FobError::InvalidParameter(format!("r - eps must be >= 1 (r={r}, eps={eps})")));
    }
    check_odd(r, "dilation size")?;
    let outer = dilate_mask(mask, r)?;
    if eps == 0 {
        return Ok(BinaryMask::zeros(mask.height(), mask.width()));
    }
    let inner = dilate_mask(mask, r - eps)?;
    let ring = outer.and_not(&inner);
    if ring.is_empty() {
        return Err(FobError::EmptyRing);
    }
    Ok(ring)
}

/// Draws `n` pixels uniformly from `region` (without replacement unless the
/// region is smaller than `n`) and orders them around the region centroid.
pub fn sample_points(region: &BinaryMask, n: usize, seed: u64) -> Result<Vec<Point2D>> {
    let anchor = region.centroid().ok_or(FobError::EmptyRing)?;
    sample_points_around(region, n, seed, anchor)
}

/// As [`sample_points`] but ordered around an explicit anchor.
pub fn sample_points_around(
    region: &BinaryMask,
    n: usize,
    seed: u64,
    anchor: Point2D,
) -> Result<Vec<Point2D>> {
    let pixels = region.pixels();
    if pixels.is_empty() {
        return Err(FobError::EmptyRing);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if pixels.len() >= n {
        rand::seq::index::sample(&mut rng, pixels.len(), n).into_vec()
    } else {
        log::warn!(
            "sampling region has {} pixels, fewer than the {n} requested; drawing with replacement",
            pixels.len()
        );
        use rand::Rng;
        (0..n).map(|_| rng.random_range(0..pixels.len())).collect()
    };
    let pts: Vec<Point2D> = chosen
        .into_iter()
        .map(|i| Point2D::new(pixels[i].0 as f64, pixels[i].1 as f64))
        .collect();
    Ok(canonical_order(&pts, anchor))
}

/// Angle about `anchor` in `[0, 2*pi)`, measured from the +col axis toward +row.
pub fn polar_angle(p: &Point2D, anchor: &Point2D) -> f64 {
    let a = (p.row - anchor.row).atan2(p.col - anchor.col);
    if a < 0.0 {
        a + TAU
    } else {
        a
    }
}

/// Sorts points by polar angle about `anchor`, then radius, then row, then col.
pub fn canonical_order(points: &[Point2D], anchor: Point2D) -> Vec<Point2D> {
    let mut keyed: Vec<(f64, f64, Point2D)> = points
        .iter()
        .map(|p| (polar_angle(p, &anchor), p.distance(&anchor), *p))
        .collect();
    keyed.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.row.total_cmp(&b.2.row))
            .then(a.2.col.total_cmp(&b.2.col))
    });
    keyed.into_iter().map(|(_, _, p)| p).collect()
}

/// Unnormalised Gaussian with peak 1 at `center`.
pub fn gaussian_heatmap(center: Point2D, sigma: f64, h: usize, w: usize) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(FobError::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let du = u as f64 - center.row;
            let dv = v as f64 - center.col;
            data.push((-(du * du + dv * dv) / denom).exp());
        }
    }
    Ok(Heatmap::new(h, w, data))
}

/// Stack of Gaussian heatmaps, one row per point: `N x (H*W)`.
pub fn gaussian_stack(points: &[Point2D], sigma: f64, h: usize, w: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((points.len(), h * w));
    for (i, p) in points.iter().enumerate() {
        let g = gaussian_heatmap(*p, sigma, h, w)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&g.data));
    }
    Ok(out)
}

/// Bilinear interpolation of the feature grid at `p` (clamped into the grid).
pub fn bilinear_sample(feat: &FeatureMap, p: Point2D) -> Vec<f64> {
    let cell = BilinearCell::new(p.row, p.col, feat.h, feat.w);
    let mut out = vec![0.0; feat.channels()];
    for (idx, wt) in cell.taps(feat.w) {
        for (o, v) in out.iter_mut().zip(feat.data.row(idx)) {
            *o += wt * v;
        }
    }
    out
}

/// Location of the maximum; ties go to the smallest row-major index.
pub fn argmax_location(h: &Heatmap) -> Point2D {
    let idx = argmax_index(&h.data);
    Point2D::new((idx / h.w) as f64, (idx % h.w) as f64)
}

pub(crate) fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
