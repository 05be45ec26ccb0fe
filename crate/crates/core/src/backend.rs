//! Point-prompt segmentation backends.
//!
//! [`OracleBackend`] is a deterministic stand-in for a promptable segmenter:
//! region growing from the positive points, with negative points growing a
//! competing region. Where both regions reach a pixel, the geodesically
//! nearer seed set wins. The tolerance is loose enough that, without
//! negatives, growth leaks into low-contrast structures touching the object.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{FobError, Result};
use crate::geometry::{BinaryMask, Point2D};
use crate::inference::PromptSet;
use crate::raster::Image;

pub trait SegBackend: Send + Sync {
    fn name(&self) -> String;

    /// Segments `image` from labelled points given in the image's own pixel
    /// coordinates.
    fn segment(&self, image: &Image, prompts: &PromptSet) -> Result<BinaryMask>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Admission tolerance on smoothed intensity.
    pub theta: f64,
    /// Half-width of the window used for a seed's reference intensity.
    pub reference_radius: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { theta: 0.25, reference_radius: 2 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OracleBackend {
    pub cfg: OracleConfig,
}

impl OracleBackend {
    pub fn new(cfg: OracleConfig) -> Self {
        Self { cfg }
    }
}

impl SegBackend for OracleBackend {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn segment(&self, image: &Image, prompts: &PromptSet) -> Result<BinaryMask> {
        oracle_segment(image, &prompts.foreground, &prompts.background, &self.cfg)
    }
}

/// Placeholder for an out-of-process segmenter reached at `url`. The
/// exchange format is the prompt-set JSON; no transport is bundled.
#[derive(Clone, Debug)]
pub struct ExternalBackend {
    pub url: String,
}

impl SegBackend for ExternalBackend {
    fn name(&self) -> String {
        format!("external:{}", self.url)
    }

    fn segment(&self, _image: &Image, _prompts: &PromptSet) -> Result<BinaryMask> {
        Err(FobError::Backend(format!(
            "no transport is built in for external backend `{}`; export prompt sets with gen-prompts instead",
            self.url
        )))
    }
}

/// Parses `oracle` or `external:<url>`.
pub fn backend_from_spec(spec: &str, oracle: OracleConfig) -> Result<Box<dyn SegBackend>> {
    if spec == "oracle" {
        return Ok(Box::new(OracleBackend::new(oracle)));
    }
    match spec.strip_prefix("external:") {
        Some(url) if !url.is_empty() => Ok(Box::new(ExternalBackend { url: url.to_string() })),
        _ => Err(FobError::Config(format!("unknown backend `{spec}` (expected `oracle` or `external:<url>`)"))),
    }
}

/// 3x3 median of the channel-mean intensity; edges are replicated.
pub fn median3(image: &Image) -> Vec<f64> {
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(h * w);
    let mut win = [0.0f64; 9];
    for r in 0..h {
        for c in 0..w {
            let mut n = 0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                    win[n] = image.intensity(rr, cc);
                    n += 1;
                }
            }
            win.sort_by(f64::total_cmp);
            out.push(win[4]);
        }
    }
    out
}

fn reference(smooth: &[f64], h: usize, w: usize, r: usize, c: usize, rad: usize) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for rr in r.saturating_sub(rad)..=(r + rad).min(h - 1) {
        for cc in c.saturating_sub(rad)..=(c + rad).min(w - 1) {
            s += smooth[rr * w + cc];
            n += 1;
        }
    }
    s / n as f64
}

/// Multi-seed BFS distance over pixels admitted by each seed's tolerance
/// test; unreachable pixels stay at `usize::MAX`.
fn geodesic(smooth: &[f64], h: usize, w: usize, seeds: &[(usize, usize)], cfg: &OracleConfig) -> Vec<usize> {
    let mut best = vec![usize::MAX; h * w];
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for &(sr, sc) in seeds {
        let reference = reference(smooth, h, w, sr, sc, cfg.reference_radius);
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        let start = sr * w + sc;
        dist[start] = 0;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            let next = [
                (r > 0).then(|| i - w),
                (r + 1 < h).then(|| i + w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
            ];
            for j in next.into_iter().flatten() {
                if dist[j] == usize::MAX && (smooth[j] - reference).abs() <= cfg.theta {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        for (b, d) in best.iter_mut().zip(&dist) {
            *b = (*b).min(*d);
        }
    }
    best
}

fn seed_pixels(points: &[Point2D], h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    points
        .iter()
        .map(|p| {
            if !p.is_finite() {
                return Err(FobError::InvalidParameter("non-finite prompt".into()));
            }
            Ok(p.pixel(h, w))
        })
        .collect()
}

/// Dual region growing with geodesic tie-breaking. The result contains
/// every foreground prompt pixel and no background prompt pixel.
pub fn oracle_segment(
    image: &Image,
    foreground: &[Point2D],
    background: &[Point2D],
    cfg: &OracleConfig,
) -> Result<BinaryMask> {
    if foreground.is_empty() {
        return Err(FobError::EmptyPrompt);
    }
    let (h, w) = image.dims();
    let smooth = median3(image);
    let fg = seed_pixels(foreground, h, w)?;
    let bg = seed_pixels(background, h, w)?;
    let d_fg = geodesic(&smooth, h, w, &fg, cfg);
    let d_bg = if bg.is_empty() { vec![usize::MAX; h * w] } else { geodesic(&smooth, h, w, &bg, cfg) };
    let mut mask = BinaryMask::from_fn(h, w, |r, c| {
        let i = r * w + c;
        d_fg[i] != usize::MAX && d_fg[i] < d_bg[i]
    });
    for &(r, c) in &fg {
        mask.set(r, c, true);
    }
    for &(r, c) in &bg {
        mask.set(r, c, false);
    }
    Ok(mask)
}
