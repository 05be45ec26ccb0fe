//! Training objectives: region-aware contrast, heatmap and coordinate
//! regression, and foreground cross-entropy.
//!
//! Each loss has a plain `f64` form and a tape form; the tape forms are what
//! the trainer differentiates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bppc::normalize_rows;
use crate::error::{FobError, Result};
use crate::geometry::{erode_mask, BinaryMask, FeatureMap, Point2D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Erosion width used to carve the outer band of the support mask.
    pub erosion: usize,
    #[serde(default)]
    pub rac_include_positive_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, lambda1: 1e3, lambda2: 1e-4, erosion: 2, rac_include_positive_in_denominator: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(FobError::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(FobError::InvalidParameter("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(FobError::DegeneratePrototype("zero vector in contrastive loss".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `-cos(p_fg, p_pos)/tau + log sum_i exp(cos(p_fg, p_b^i)/tau)`; with the
/// flag set the positive term joins the denominator.
pub fn rac_loss(p_fg: &[f64], p_pos: &[f64], p_bg: &Array2<f64>, tau: f64, include_positive: bool) -> Result<f64> {
    let pos = cosine(p_fg, p_pos)? / tau;
    let mut logits = Vec::with_capacity(p_bg.nrows() + 1);
    for row in p_bg.rows() {
        logits.push(cosine(p_fg, row.as_slice().expect("contiguous"))? / tau);
    }
    if include_positive {
        logits.push(pos);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

pub fn rac_loss_var(t: &mut Tape, p_fg: Var, p_pos: Var, p_bg: Var, tau: f64, include_positive: bool) -> Result<Var> {
    let zero = |t: &Tape, v: Var| t.value(v).rows().into_iter().any(|r| r.iter().all(|x| *x == 0.0));
    if zero(t, p_fg) || zero(t, p_pos) || zero(t, p_bg) {
        return Err(FobError::DegeneratePrototype("zero vector in contrastive loss".into()));
    }
    let pos = t.cosine_rows(p_pos, p_fg);
    let pos = t.scale(pos, 1.0 / tau);
    let neg = t.cosine_rows(p_bg, p_fg);
    let neg = t.scale(neg, 1.0 / tau);
    let all = if include_positive { t.concat_rows(&[neg, pos]) } else { neg };
    // cosines are bounded, so |logits| <= 1/tau and the plain log-sum-exp is safe
    let e = t.exp(all);
    let s = t.sum_all(e);
    let lse = t.ln(s);
    Ok(t.sub(lse, pos))
}

/// Outer band of the support mask: `mask AND NOT erode(mask, e)`. Falls back
/// to the whole mask (with a warning) when the band is empty.
pub fn positive_region(mask: &BinaryMask, e: usize) -> Result<BinaryMask> {
    if mask.is_empty() {
        return Err(FobError::EmptyMask);
    }
    let band = mask.and_not(&erode_mask(mask, e));
    if band.is_empty() {
        log::warn!("outer band of the support mask is empty; using the whole mask");
        return Ok(mask.clone());
    }
    Ok(band)
}

/// Normalised `1 x (h*w)` pooling row for the positive prototype.
pub fn positive_weights(mask: &BinaryMask, e: usize) -> Result<Array2<f64>> {
    let region = positive_region(mask, e)?;
    normalize_rows(&Array2::from_shape_vec((1, region.as_slice().len()), region.to_f64()).expect("row"))
}

pub fn positive_prototype(feat_s: &FeatureMap, mask_s: &BinaryMask, e: usize) -> Result<Vec<f64>> {
    if mask_s.dims() != (feat_s.h, feat_s.w) {
        return Err(FobError::Shape("mask and features differ in size".into()));
    }
    Ok(positive_weights(mask_s, e)?.dot(&feat_s.data).into_iter().collect())
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(FobError::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `(|Phi - H|^2 + |Hhat - H|^2) / (N_p h w)` over `N_p x (h*w)` stacks.
pub fn heatmap_loss(phi: &Array2<f64>, hhat: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_same(phi, gt, "heatmap loss")?;
    check_same(hhat, gt, "heatmap loss")?;
    let sq = |a: &Array2<f64>| (a - gt).mapv(|d| d * d).sum();
    Ok((sq(phi) + sq(hhat)) / gt.len() as f64)
}

pub fn heatmap_loss_var(t: &mut Tape, phi: Var, hhat: Var, gt: Var) -> Result<Var> {
    let shape = t.shape(gt);
    if t.shape(phi) != shape || t.shape(hhat) != shape {
        return Err(FobError::Shape("heatmap loss stacks differ in shape".into()));
    }
    let n = (shape.0 * shape.1) as f64;
    let d1 = t.sub(phi, gt);
    let d1 = t.mul(d1, d1);
    let d2 = t.sub(hhat, gt);
    let d2 = t.mul(d2, d2);
    let s = t.add(d1, d2);
    let s = t.sum_all(s);
    Ok(t.scale(s, 1.0 / n))
}

/// Mean squared point distance between index-matched lists.
pub fn coord_loss(refined: &[Point2D], gt: &[Point2D]) -> Result<f64> {
    if refined.len() != gt.len() || gt.is_empty() {
        return Err(FobError::Shape(format!("coordinate loss over {} vs {} points", refined.len(), gt.len())));
    }
    Ok(refined.iter().zip(gt).map(|(a, b)| (a.row - b.row).powi(2) + (a.col - b.col).powi(2)).sum::<f64>()
        / gt.len() as f64)
}

pub fn coord_loss_var(t: &mut Tape, refined: Var, gt: Var) -> Result<Var> {
    let shape = t.shape(gt);
    if t.shape(refined) != shape || shape.1 != 2 {
        return Err(FobError::Shape("coordinate loss expects matching N x 2 inputs".into()));
    }
    let d = t.sub(refined, gt);
    let d = t.mul(d, d);
    let s = t.sum_all(d);
    Ok(t.scale(s, 1.0 / shape.0 as f64))
}

/// Mean binary cross-entropy of the calibrated correlation against the mask.
pub fn foreground_loss(calibrated: &[f64], mask: &BinaryMask) -> Result<f64> {
    if calibrated.len() != mask.as_slice().len() {
        return Err(FobError::Shape("calibrated map and mask differ in size".into()));
    }
    let s: f64 = calibrated
        .iter()
        .zip(mask.as_slice())
        .map(|(&c, &m)| if m == 1 { -c.ln() } else { -(1.0 - c).ln() })
        .sum();
    Ok(s / calibrated.len() as f64)
}

pub fn foreground_loss_var(t: &mut Tape, calibrated: Var, mask: &BinaryMask) -> Result<Var> {
    let n = mask.as_slice().len();
    if t.shape(calibrated) != (n, 1) {
        return Err(FobError::Shape("calibrated map and mask differ in size".into()));
    }
    let y = t.constant(Array2::from_shape_vec((n, 1), mask.to_f64()).expect("mask column"));
    let ny = t.constant(Array2::from_shape_vec((n, 1), mask.not().to_f64()).expect("mask column"));
    let lp = t.ln(calibrated);
    let om = t.one_minus(calibrated);
    let lq = t.ln(om);
    let a = t.mul(y, lp);
    let b = t.mul(ny, lq);
    let s = t.add(a, b);
    let s = t.sum_all(s);
    Ok(t.scale(s, -1.0 / n as f64))
}

/// The four loss terms of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rac: f64,
    pub heat: f64,
    pub coor: f64,
    pub fore: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 4] {
        [("L_rac", self.rac), ("L_heat", self.heat), ("L_coor", self.coor), ("L_fore", self.fore)]
    }

    /// Divergence error naming the first non-finite term.
    pub fn check_finite(&self, iter: usize) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(FobError::Divergence { term: term.to_string(), iter }),
            None => Ok(()),
        }
    }
}

/// `L_rac + lambda1 L_heat + lambda2 L_coor + L_fore`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    parts.check_finite(0)?;
    Ok(parts.rac + cfg.lambda1 * parts.heat + cfg.lambda2 * parts.coor + parts.fore)
}

/// Tape nodes for the four terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rac: Var,
    pub heat: Var,
    pub coor: Var,
    pub fore: Var,
}

impl LossVars {
    pub fn total(&self, t: &mut Tape, cfg: &LossConfig) -> Var {
        let heat = t.scale(self.heat, cfg.lambda1);
        let coor = t.scale(self.coor, cfg.lambda2);
        let s = t.add(self.rac, heat);
        let s = t.add(s, coor);
        t.add(s, self.fore)
    }

    pub fn parts(&self, t: &Tape) -> LossParts {
        LossParts { rac: t.scalar(self.rac), heat: t.scalar(self.heat), coor: t.scalar(self.coor), fore: t.scalar(self.fore) }
    }
}
