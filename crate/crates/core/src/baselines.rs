//! Two naive prompt extractors used for comparison: one reads a probability
//! map's extremes, the other samples inside and outside a coarse mask.

use crate::error::{FobError, Result};
use crate::geometry::{sample_points, BinaryMask, Point2D};
use crate::inference::PromptSet;

/// `n_fg` highest and `n_bg` lowest pixels of `prob`; ties go to the
/// earlier row-major index.
pub fn baseline_confidence_prompts(prob: &[f64], h: usize, w: usize, n_fg: usize, n_bg: usize) -> PromptSet {
    assert_eq!(prob.len(), h * w, "probability map size");
    let to_point = |i: usize| Point2D::new((i / w) as f64, (i % w) as f64);
    let mut idx: Vec<usize> = (0..prob.len()).collect();
    idx.sort_by(|&a, &b| prob[b].total_cmp(&prob[a]).then(a.cmp(&b)));
    let foreground = idx.iter().take(n_fg).map(|&i| to_point(i)).collect();
    idx.sort_by(|&a, &b| prob[a].total_cmp(&prob[b]).then(a.cmp(&b)));
    let background = idx.iter().take(n_bg).map(|&i| to_point(i)).collect();
    PromptSet { image_size: [h, w], foreground, background }
}

/// Uniform samples inside (foreground) and outside (background) a coarse mask.
pub fn baseline_mask_prompts(coarse: &BinaryMask, n_fg: usize, n_bg: usize, seed: u64) -> Result<PromptSet> {
    let outside = coarse.not();
    if coarse.is_empty() || outside.is_empty() {
        return Err(FobError::DegenerateMask("coarse mask must contain both classes".into()));
    }
    let (h, w) = coarse.dims();
    Ok(PromptSet {
        image_size: [h, w],
        foreground: sample_points(coarse, n_fg, seed)?,
        background: sample_points(&outside, n_bg, seed.wrapping_add(1))?,
    })
}
