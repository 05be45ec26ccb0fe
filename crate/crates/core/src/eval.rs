//! Episodic evaluation through a segmentation backend.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::SegBackend;
use crate::baselines::{baseline_confidence_prompts, baseline_mask_prompts};
use crate::episodes::{sub_seed, Episode, EpisodeSampler};
use crate::error::{FobError, Result};
use crate::geometry::{differential_ring, sample_points, BinaryMask, Point2D};
use crate::inference::{infer, InferenceConfig, InferenceOutput, PromptSet};
use crate::metrics::{dice, fraction_inside, BoundaryDistance, Ellipse};
use crate::model::FobModel;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Which prompts reach the backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    /// Sampled foreground plus refined background prompts.
    Full,
    /// Foreground prompts only.
    NoBgPrompts,
    /// Coarse heatmap peaks in place of the refined background prompts.
    NoSpr,
    /// Extremes of the calibrated correlation map.
    Confidence,
    /// Uniform samples inside/outside the thresholded correlation map.
    CoarseMask,
    /// Foreground and ring prompts drawn from the query ground truth.
    GroundTruth,
    /// Ground-truth foreground with background points anywhere in the image.
    Random,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 7] = [
        PromptVariant::Full,
        PromptVariant::NoBgPrompts,
        PromptVariant::NoSpr,
        PromptVariant::Confidence,
        PromptVariant::CoarseMask,
        PromptVariant::GroundTruth,
        PromptVariant::Random,
    ];

    pub fn needs_model(self) -> bool {
        !matches!(self, PromptVariant::GroundTruth | PromptVariant::Random)
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::Full => "full",
            PromptVariant::NoBgPrompts => "no-bg-prompts",
            PromptVariant::NoSpr => "no-spr",
            PromptVariant::Confidence => "confidence",
            PromptVariant::CoarseMask => "coarse-mask",
            PromptVariant::GroundTruth => "ground-truth",
            PromptVariant::Random => "random",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptVariant {
    type Err = FobError;

    fn from_str(s: &str) -> Result<Self> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FobError::InvalidParameter(format!("unknown prompt variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub inference: InferenceConfig,
    /// Ring used by the ground-truth and random variants and by the ring
    /// residual metric, in working pixels.
    pub r: usize,
    pub eps: usize,
    pub n_bg: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 200, seed: 0, inference: InferenceConfig::default(), r: 15, eps: 2, n_bg: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub category: String,
    pub domain: String,
    pub dice: f64,
    pub n_fg: usize,
    pub n_bg: usize,
    /// Fraction of background prompts on ground-truth foreground.
    pub bg_inside: Option<f64>,
    /// Mean distance of background prompts to the ground-truth boundary.
    pub bg_boundary: Option<f64>,
    /// Mean squared distance of background prompts to the ellipse fitted
    /// through the ground-truth ring.
    pub ring_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub category: String,
    pub episodes: usize,
    pub dice: f64,
    pub bg_inside: Option<f64>,
    pub bg_boundary: Option<f64>,
    pub ring_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub variant: PromptVariant,
    pub backend: String,
    pub seed: u64,
    pub categories: Vec<SummaryRow>,
    pub mean: SummaryRow,
    pub episodes: Vec<EpisodeRecord>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(category: &str, records: &[&EpisodeRecord]) -> SummaryRow {
    SummaryRow {
        category: category.to_string(),
        episodes: records.len(),
        dice: records.iter().map(|r| r.dice).sum::<f64>() / records.len().max(1) as f64,
        bg_inside: mean_of(records.iter().map(|r| r.bg_inside)),
        bg_boundary: mean_of(records.iter().map(|r| r.bg_boundary)),
        ring_residual: mean_of(records.iter().map(|r| r.ring_residual)),
    }
}

impl Report {
    /// Builds the summaries; records are sorted by episode index first so
    /// the result does not depend on evaluation order.
    pub fn from_records(variant: PromptVariant, backend: &str, seed: u64, mut episodes: Vec<EpisodeRecord>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(FobError::EmptyStream);
        }
        episodes.sort_by_key(|r| r.index);
        let mut groups: BTreeMap<&str, Vec<&EpisodeRecord>> = BTreeMap::new();
        for r in &episodes {
            groups.entry(&r.category).or_default().push(r);
        }
        let categories = groups.iter().map(|(c, rs)| summarize(c, rs)).collect();
        let all: Vec<&EpisodeRecord> = episodes.iter().collect();
        let mean = summarize("mean", &all);
        Ok(Report { schema_version: REPORT_SCHEMA_VERSION, variant, backend: backend.into(), seed, categories, mean, episodes })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per category plus the mean row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "episodes", "dice", "bg_inside", "bg_boundary", "ring_residual"])
            .map_err(|e| FobError::Io(e.into()))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in self.categories.iter().chain(std::iter::once(&self.mean)) {
            w.write_record([
                row.category.clone(),
                row.episodes.to_string(),
                format!("{:.6}", row.dice),
                opt(row.bg_inside),
                opt(row.bg_boundary),
                opt(row.ring_residual),
            ])
            .map_err(|e| FobError::Io(e.into()))?;
        }
        let bytes = w.into_inner().map_err(|e| FobError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>8} {:>10} {:>12}\n", "category", "episodes", "dice", "bg_inside", "bg_boundary");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for row in self.categories.iter().chain(std::iter::once(&self.mean)) {
            s += &format!(
                "{:<14} {:>8} {:>8.4} {:>10} {:>12}\n",
                row.category,
                row.episodes,
                row.dice,
                opt(row.bg_inside),
                opt(row.bg_boundary)
            );
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }
}

/// Coarse mask for the mask baseline: calibrated values above the threshold,
/// or above the map mean when that leaves one class.
fn coarse_mask(values: &[f64], h: usize, w: usize, threshold: f64) -> BinaryMask {
    let m = BinaryMask::from_fn(h, w, |r, c| values[r * w + c] > threshold);
    if !m.is_empty() && !m.not().is_empty() {
        return m;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    BinaryMask::from_fn(h, w, |r, c| values[r * w + c] > mean)
}

/// Prompts for one variant in query-image coordinates. `out` is the model
/// output for model-based variants.
pub fn variant_prompts(
    variant: PromptVariant,
    episode: &Episode,
    out: Option<&InferenceOutput>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<PromptSet> {
    let dims = episode.query_image.dims();
    let gt = || episode.query_mask.as_ref().ok_or_else(|| FobError::InvalidParameter("episode lacks a query mask".into()));
    let model_out = || out.ok_or_else(|| FobError::InvalidParameter(format!("variant {variant} needs a model")));
    let working = |fg: Vec<Point2D>, bg: Vec<Point2D>, s: usize| {
        PromptSet { image_size: [s, s], foreground: fg, background: bg }.rescaled(dims)
    };
    Ok(match variant {
        PromptVariant::Full => model_out()?.prompts.clone(),
        PromptVariant::NoBgPrompts => model_out()?.prompts.without_background(),
        PromptVariant::NoSpr => {
            let o = model_out()?;
            working(o.working.foreground.clone(), o.prediction.coarse.clone(), o.working.image_size[0])
        }
        PromptVariant::Confidence => {
            let o = model_out()?;
            let s = o.working.image_size[0];
            let p = baseline_confidence_prompts(&o.prediction.calibrated, s, s, cfg.inference.n_fg, cfg.n_bg);
            p.rescaled(dims)
        }
        PromptVariant::CoarseMask => {
            let o = model_out()?;
            let s = o.working.image_size[0];
            let m = coarse_mask(&o.prediction.calibrated, s, s, cfg.inference.threshold);
            baseline_mask_prompts(&m, cfg.inference.n_fg, cfg.n_bg, seed)?.rescaled(dims)
        }
        PromptVariant::GroundTruth => {
            let gt = gt()?;
            let (h, w) = gt.dims();
            let ring = differential_ring(gt, cfg.r, cfg.eps)?;
            PromptSet {
                image_size: [h, w],
                foreground: sample_points(gt, cfg.inference.n_fg, sub_seed(seed, 0))?,
                background: sample_points(&ring, cfg.n_bg, sub_seed(seed, 1))?,
            }
        }
        PromptVariant::Random => {
            let gt = gt()?;
            let (h, w) = gt.dims();
            PromptSet {
                image_size: [h, w],
                foreground: sample_points(gt, cfg.inference.n_fg, sub_seed(seed, 0))?,
                background: sample_points(&BinaryMask::ones(h, w), cfg.n_bg, sub_seed(seed, 1))?,
            }
        }
    })
}

/// Scores one prompt set against the episode's ground truth.
pub fn score(
    index: usize,
    episode: &Episode,
    prompts: &PromptSet,
    backend: &dyn SegBackend,
    cfg: &EvalConfig,
) -> Result<EpisodeRecord> {
    let gt = episode
        .query_mask
        .as_ref()
        .ok_or_else(|| FobError::InvalidParameter("evaluation episode lacks a query mask".into()))?;
    let pred = backend.segment(&episode.query_image, prompts)?;
    let bg = &prompts.background;
    let ring_residual = match differential_ring(gt, cfg.r, cfg.eps) {
        Ok(ring) if !bg.is_empty() => {
            let pts: Vec<Point2D> = ring.pixels().into_iter().map(|(r, c)| Point2D::new(r as f64, c as f64)).collect();
            Ellipse::fit(&pts).ok().and_then(|e| e.mean_squared_residual(bg))
        }
        _ => None,
    };
    Ok(EpisodeRecord {
        index,
        category: episode.category_id.clone(),
        domain: episode.domain_id.clone(),
        dice: dice(&pred, gt)?,
        n_fg: prompts.foreground.len(),
        n_bg: bg.len(),
        bg_inside: fraction_inside(bg, gt),
        bg_boundary: BoundaryDistance::new(gt)?.mean(bg),
        ring_residual,
    })
}

/// Evaluates several prompt variants on the same episodes. Model inference
/// runs once per episode; episodes are processed in parallel and the
/// reports do not depend on the thread count.
pub fn evaluate_variants(
    model: Option<&FobModel>,
    sampler: &EpisodeSampler,
    backend: &dyn SegBackend,
    cfg: &EvalConfig,
    variants: &[PromptVariant],
) -> Result<Vec<Report>> {
    if cfg.n_episodes == 0 {
        return Err(FobError::EmptyStream);
    }
    if model.is_none() {
        if let Some(v) = variants.iter().find(|v| v.needs_model()) {
            return Err(FobError::InvalidParameter(format!("variant {v} needs a model")));
        }
    }
    let per_episode: Vec<Vec<EpisodeRecord>> = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let episode = sampler.episode(i as u64)?;
            let seed = sub_seed(cfg.seed, i as u64);
            let out = match model {
                Some(m) if variants.iter().any(|v| v.needs_model()) => Some(
                    infer(m, &episode.support_image, &episode.support_mask, &episode.query_image, &cfg.inference, seed)
                        .map_err(|e| FobError::Stage { stage: "inference", source: Box::new(e) })?,
                ),
                _ => None,
            };
            variants
                .iter()
                .map(|&v| {
                    let prompts = variant_prompts(v, &episode, out.as_ref(), cfg, sub_seed(seed, 2))?;
                    score(i, &episode, &prompts, backend, cfg)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    variants
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let records = per_episode.iter().map(|rs| rs[k].clone()).collect();
            Report::from_records(v, &backend.name(), cfg.seed, records)
        })
        .collect()
}

pub fn evaluate(
    model: Option<&FobModel>,
    sampler: &EpisodeSampler,
    backend: &dyn SegBackend,
    cfg: &EvalConfig,
    variant: PromptVariant,
) -> Result<Report> {
    Ok(evaluate_variants(model, sampler, backend, cfg, &[variant])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::OracleBackend;
    use crate::episodes::{clean_category, standard_categories};

    fn record(index: usize, category: &str, dice: f64) -> EpisodeRecord {
        EpisodeRecord {
            index,
            category: category.into(),
            domain: "plain".into(),
            dice,
            n_fg: 1,
            n_bg: 0,
            bg_inside: None,
            bg_boundary: None,
            ring_residual: None,
        }
    }

    #[test]
    fn report_is_order_independent() {
        let a = vec![record(0, "b", 0.5), record(1, "a", 1.0), record(2, "b", 0.7)];
        let mut b = a.clone();
        b.reverse();
        let ra = Report::from_records(PromptVariant::Full, "oracle", 0, a).unwrap();
        let rb = Report::from_records(PromptVariant::Full, "oracle", 0, b).unwrap();
        assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
        assert_eq!(ra.categories.len(), 2);
        assert_eq!(ra.categories[0].category, "a");
        assert!((ra.categories[1].dice - 0.6).abs() < 1e-12);
        assert!((ra.mean.dice - 2.2 / 3.0).abs() < 1e-12);
        let csv = ra.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,3,"));
        assert!(matches!(Report::from_records(PromptVariant::Full, "o", 0, vec![]), Err(FobError::EmptyStream)));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PromptVariant::ALL {
            assert_eq!(v.name().parse::<PromptVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
    }

    #[test]
    fn ground_truth_prompts_segment_clean_categories() {
        let cats: Vec<_> = ["disc", "oval"].iter().map(|c| clean_category(c)).collect();
        let sampler = EpisodeSampler::new(cats, 32, 3).unwrap();
        let cfg = EvalConfig { n_episodes: 8, r: 7, ..EvalConfig::default() };
        let rep = evaluate(None, &sampler, &OracleBackend::default(), &cfg, PromptVariant::GroundTruth).unwrap();
        assert!(rep.mean.dice >= 0.95, "{}", rep.mean.dice);
        assert_eq!(rep.mean.bg_inside, Some(0.0));
    }

    #[test]
    fn model_variants_require_a_model() {
        let sampler = EpisodeSampler::new(standard_categories(), 32, 0).unwrap();
        let cfg = EvalConfig { n_episodes: 1, ..EvalConfig::default() };
        assert!(evaluate(None, &sampler, &OracleBackend::default(), &cfg, PromptVariant::Full).is_err());
        let cfg = EvalConfig { n_episodes: 0, ..cfg };
        assert!(matches!(
            evaluate(None, &sampler, &OracleBackend::default(), &cfg, PromptVariant::Random),
            Err(FobError::EmptyStream)
        ));
    }
}
