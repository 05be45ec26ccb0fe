//! Prompt generation for a support/query pair and the prompt-set exchange
//! format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::sub_seed;
use crate::error::{FobError, Result};
use crate::geometry::{BinaryMask, Point2D};
use crate::model::{FobModel, Prediction};
use crate::raster::{resize_mask_nearest, Image};

mod pairs {
    use super::Point2D;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(pts: &[Point2D], s: S) -> Result<S::Ok, S::Error> {
        pts.iter().map(|p| [p.row, p.col]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point2D>, D::Error> {
        Ok(Vec::<[f64; 2]>::deserialize(d)?.into_iter().map(|[r, c]| Point2D::new(r, c)).collect())
    }
}

/// Labelled point prompts in the pixel coordinates of an image of size
/// `image_size = [H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub image_size: [usize; 2],
    #[serde(with = "pairs")]
    pub foreground: Vec<Point2D>,
    #[serde(with = "pairs")]
    pub background: Vec<Point2D>,
}

impl PromptSet {
    /// Checks every point is finite and inside the image.
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h == 0 || w == 0 {
            return Err(FobError::InvalidParameter("prompt set has an empty image size".into()));
        }
        let inside = |p: &Point2D| p.is_finite() && p.row >= 0.0 && p.col >= 0.0 && p.row <= (h - 1) as f64 && p.col <= (w - 1) as f64;
        if let Some(p) = self.foreground.iter().chain(&self.background).find(|p| !inside(p)) {
            return Err(FobError::InvalidParameter(format!("prompt ({}, {}) outside {h}x{w}", p.row, p.col)));
        }
        Ok(())
    }

    pub fn without_background(&self) -> PromptSet {
        PromptSet { background: Vec::new(), ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: PromptSet = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FobError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Maps every point between two grids with the pixel-centre convention.
    pub fn rescaled(&self, to: (usize, usize)) -> PromptSet {
        let from = (self.image_size[0], self.image_size[1]);
        let map = |p: &Point2D| rescale_point(*p, from, to);
        PromptSet {
            image_size: [to.0, to.1],
            foreground: self.foreground.iter().map(map).collect(),
            background: self.background.iter().map(map).collect(),
        }
    }
}

/// `x_to = (x_from + 0.5) * to / from - 0.5`, clamped into the target grid.
pub fn rescale_point(p: Point2D, from: (usize, usize), to: (usize, usize)) -> Point2D {
    let f = |x: f64, a: usize, b: usize| ((x + 0.5) * b as f64 / a as f64 - 0.5).clamp(0.0, (b - 1) as f64);
    Point2D::new(f(p.row, from.0, to.0), f(p.col, from.1, to.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Number of foreground prompts `N_f`.
    pub n_fg: usize,
    /// Calibrated-correlation threshold `T`.
    pub threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { n_fg: 10, threshold: 0.9 }
    }
}

/// Uniform sample (without replacement) of up to `n` pixels whose value
/// exceeds `threshold`; when fewer qualify, the `n` highest pixels. Output
/// is sorted by descending value, ties by row-major index.
pub fn sample_foreground_prompts(values: &[f64], h: usize, w: usize, threshold: f64, n: usize, seed: u64) -> Vec<Point2D> {
    assert_eq!(values.len(), h * w, "value map size");
    let above: Vec<usize> = (0..values.len()).filter(|&i| values[i] > threshold).collect();
    let mut chosen: Vec<usize> = if above.len() >= n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, above.len(), n).into_iter().map(|k| above[k]).collect()
    } else {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(n);
        order
    };
    chosen.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    chosen.into_iter().map(|i| Point2D::new((i / w) as f64, (i % w) as f64)).collect()
}

/// Prompts at both scales plus the raw model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    /// In query-image coordinates.
    pub prompts: PromptSet,
    /// In working-grid coordinates.
    pub working: PromptSet,
    pub prediction: Prediction,
}

/// Resizes inputs to the working size, runs the model and samples
/// foreground prompts from the calibrated correlation.
pub fn infer(
    model: &FobModel,
    support_image: &Image,
    support_mask: &BinaryMask,
    query_image: &Image,
    cfg: &InferenceConfig,
    seed: u64,
) -> Result<InferenceOutput> {
    if support_mask.dims() != support_image.dims() {
        return Err(FobError::Shape("support mask and image differ in size".into()));
    }
    if support_mask.is_empty() {
        return Err(FobError::EmptyMask);
    }
    let s = model.cfg.size();
    let si = support_image.resize_bilinear(s, s);
    let sm = resize_mask_nearest(support_mask, s, s);
    if sm.is_empty() {
        return Err(FobError::Stage { stage: "resize", source: Box::new(FobError::EmptyMask) });
    }
    let qi = query_image.resize_bilinear(s, s);
    let prediction = model.predict(&si, &sm, &qi, sub_seed(seed, 0))?;
    let fg = sample_foreground_prompts(&prediction.calibrated, s, s, cfg.threshold, cfg.n_fg, sub_seed(seed, 1));
    let working = PromptSet { image_size: [s, s], foreground: fg, background: prediction.refined.clone() };
    let prompts = working.rescaled(query_image.dims());
    Ok(InferenceOutput { prompts, working, prediction })
}

pub fn infer_prompts(
    model: &FobModel,
    support_image: &Image,
    support_mask: &BinaryMask,
    query_image: &Image,
    cfg: &InferenceConfig,
    seed: u64,
) -> Result<PromptSet> {
    Ok(infer(model, support_image, support_mask, query_image, cfg, seed)?.prompts)
}
