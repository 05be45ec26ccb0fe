//! One-shot episodes: synthetic shape categories with boundary-touching
//! low-contrast distractors, superpixel pseudo-labels, folder datasets and
//! episode export.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FobError, Result};
use crate::geometry::BinaryMask;
use crate::raster::{load_mask, resize_mask_nearest, save_mask_png, Image};

/// SplitMix64 step: derives independent stream seeds from one base seed.
pub fn sub_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A synthetic "organ" class. Axis ranges are fractions of the shorter
/// image side; intensities are in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub id: String,
    pub axis_a: [f64; 2],
    pub axis_b: [f64; 2],
    /// Relative amplitudes of boundary harmonics of order 2, 3, ...
    pub harmonics: Vec<f64>,
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
    pub distractors: usize,
    /// Intensity gap between a distractor and the foreground.
    pub distractor_contrast: f64,
    /// Distractor radius range, fraction of the shorter side.
    pub distractor_size: [f64; 2],
}

impl CategorySpec {
    /// `|fg_mean - bg_mean|`.
    pub fn contrast(&self) -> f64 {
        (self.fg_mean - self.bg_mean).abs()
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.axis_a, self.axis_b, self.distractor_size];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0)) {
            return Err(FobError::Generation(format!("category {}: bad size range", self.id)));
        }
        if self.noise_sigma < 0.0 || self.distractor_contrast < 0.0 {
            return Err(FobError::Generation(format!("category {}: negative noise or contrast", self.id)));
        }
        if self.harmonics.iter().map(|a| a.abs()).sum::<f64>() >= 0.8 {
            return Err(FobError::Generation(format!("category {}: harmonics too strong", self.id)));
        }
        Ok(())
    }
}

/// An acquisition "domain": an intensity transform applied after rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    pub invert: bool,
    pub gain: f64,
    pub offset: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self { id: "plain".into(), invert: false, gain: 1.0, offset: 0.0 }
    }
}

impl DomainSpec {
    fn apply(&self, v: f64) -> f64 {
        let v = self.gain * v + self.offset;
        let v = if self.invert { 1.0 - v } else { v };
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_image: Image,
    pub support_mask: BinaryMask,
    pub query_image: Image,
    pub query_mask: Option<BinaryMask>,
    pub category_id: String,
    pub domain_id: String,
    pub seed: u64,
}

impl Episode {
    pub fn size(&self) -> (usize, usize) {
        self.support_image.dims()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

struct Shape {
    center: (f64, f64),
    a: f64,
    b: f64,
    theta: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Shape {
    fn radius_factor(&self, phi: f64) -> f64 {
        1.0 + self.harmonics.iter().enumerate().map(|(i, (amp, ph))| amp * ((i + 2) as f64 * phi + ph).cos()).sum::<f64>()
    }

    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.center.0, c - self.center.1);
        let (s, co) = self.theta.sin_cos();
        let x = (dx * co + dy * s) / self.a;
        let y = (-dx * s + dy * co) / self.b;
        let d = x.hypot(y);
        d <= self.radius_factor(y.atan2(x))
    }

    fn max_radius(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.harmonics.iter().map(|(a, _)| a.abs()).sum::<f64>())
    }
}

/// Renders one image/mask instance of a category.
fn draw_instance(
    spec: &CategorySpec,
    domain: &DomainSpec,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, BinaryMask)> {
    let side = h.min(w) as f64;
    let a = uniform(rng, spec.axis_a) * side;
    let b = uniform(rng, spec.axis_b) * side;
    if a.min(b) < 4.0 {
        return Err(FobError::Generation(format!("category {}: axes below 4 px at size {h}x{w}", spec.id)));
    }
    let harmonics = spec.harmonics.iter().map(|&amp| (amp, rng.random_range(0.0..TAU))).collect();
    let mut shape = Shape { center: (0.0, 0.0), a, b, theta: rng.random_range(0.0..PI), harmonics };
    let m = shape.max_radius() + 1.0;
    let pick = |rng: &mut ChaCha8Rng, n: usize| {
        let (lo, hi) = (m, n as f64 - 1.0 - m);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            (n as f64 - 1.0) / 2.0
        }
    };
    shape.center = (pick(rng, h), pick(rng, w));
    let mask = BinaryMask::from_fn(h, w, |r, c| shape.contains(r as f64, c as f64));
    let frac = mask.fraction();
    if !(0.01..=0.9).contains(&frac) {
        return Err(FobError::Generation(format!("category {}: mask covers {:.1}% of the image", spec.id, frac * 100.0)));
    }

    // distractors: discs centred just outside the boundary so each one touches it
    let mut distractor = BinaryMask::zeros(h, w);
    for _ in 0..spec.distractors {
        let phi: f64 = rng.random_range(0.0..TAU);
        let (dy, dx) = phi.sin_cos();
        let mut t = 0.0;
        while shape.contains(shape.center.0 + t * dy, shape.center.1 + t * dx) && t < side {
            t += 0.25;
        }
        let rd = uniform(rng, spec.distractor_size) * side;
        let aspect = rng.random_range(0.7..1.3);
        let (cy, cx) = (shape.center.0 + (t + 0.6 * rd) * dy, shape.center.1 + (t + 0.6 * rd) * dx);
        let blob = BinaryMask::from_fn(h, w, |r, c| {
            let (u, v) = (r as f64 - cy, c as f64 - cx);
            (u / (rd * aspect)).powi(2) + (v / (rd / aspect)).powi(2) <= 1.0
        });
        distractor = distractor.or(&blob.and_not(&mask));
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("finite sigma");
    let toward_bg = if spec.bg_mean >= spec.fg_mean { 1.0 } else { -1.0 };
    let d_level = spec.fg_mean + toward_bg * spec.distractor_contrast;
    let (gy, gx) = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let base = if mask.get(r, c) {
                spec.fg_mean
            } else if distractor.get(r, c) {
                d_level
            } else {
                spec.bg_mean + gy * (r as f64 / h as f64 - 0.5) + gx * (c as f64 / w as f64 - 0.5)
            };
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(domain.apply((base + n).clamp(0.0, 1.0)));
        }
    }
    Ok((Image::gray(h, w, data), mask))
}

/// Support and query instances of one category, each with its own pose and
/// noise, plus the query ground truth.
pub fn generate_episode(spec: &CategorySpec, size: (usize, usize), seed: u64) -> Result<Episode> {
    generate_episode_in(spec, &DomainSpec::default(), size, seed)
}

pub fn generate_episode_in(spec: &CategorySpec, domain: &DomainSpec, size: (usize, usize), seed: u64) -> Result<Episode> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(FobError::Generation(format!("episode size must be at least 32x32, got {h}x{w}")));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (support_image, support_mask) = draw_instance(spec, domain, h, w, &mut rng)?;
    let (query_image, query_mask) = draw_instance(spec, domain, h, w, &mut rng)?;
    Ok(Episode {
        support_image,
        support_mask,
        query_image,
        query_mask: Some(query_mask),
        category_id: spec.id.clone(),
        domain_id: domain.id.clone(),
        seed,
    })
}

/// Ten built-in categories spanning shape, polarity and distractor load.
pub fn standard_categories() -> Vec<CategorySpec> {
    let cat = |id: &str, a: [f64; 2], b: [f64; 2], harm: &[f64], fg: f64, bg: f64, nd: usize, dsize: [f64; 2]| {
        CategorySpec {
            id: id.into(),
            axis_a: a,
            axis_b: b,
            harmonics: harm.to_vec(),
            fg_mean: fg,
            bg_mean: bg,
            noise_sigma: 0.1,
            distractors: nd,
            distractor_contrast: 0.06,
            distractor_size: dsize,
        }
    };
    vec![
        cat("disc", [0.15, 0.2], [0.15, 0.2], &[], 0.75, 0.25, 1, [0.15, 0.2]),
        cat("oval", [0.2, 0.26], [0.13, 0.16], &[], 0.7, 0.3, 1, [0.15, 0.2]),
        cat("kidney", [0.18, 0.24], [0.13, 0.17], &[0.12], 0.3, 0.75, 1, [0.15, 0.2]),
        cat("lobe", [0.16, 0.22], [0.14, 0.18], &[0.0, 0.12], 0.8, 0.35, 2, [0.12, 0.16]),
        cat("star", [0.17, 0.21], [0.17, 0.21], &[0.0, 0.0, 0.1], 0.25, 0.7, 1, [0.15, 0.19]),
        cat("bean", [0.2, 0.25], [0.13, 0.15], &[0.1, 0.05], 0.65, 0.2, 2, [0.12, 0.16]),
        cat("drop", [0.16, 0.2], [0.13, 0.17], &[0.0, 0.15], 0.2, 0.65, 1, [0.15, 0.2]),
        cat("blob", [0.15, 0.22], [0.15, 0.22], &[0.08, 0.06], 0.85, 0.4, 1, [0.15, 0.2]),
        cat("clover", [0.18, 0.22], [0.18, 0.22], &[0.0, 0.0, 0.0, 0.1], 0.35, 0.8, 2, [0.12, 0.15]),
        cat("gland", [0.2, 0.24], [0.14, 0.18], &[0.05, 0.08], 0.7, 0.15, 1, [0.15, 0.2]),
    ]
}

/// A clean variant of a category: no distractors, full contrast.
pub fn clean_category(id: &str) -> CategorySpec {
    CategorySpec {
        id: id.into(),
        axis_a: [0.2, 0.25],
        axis_b: [0.2, 0.25],
        harmonics: vec![],
        fg_mean: 1.0,
        bg_mean: 0.0,
        noise_sigma: 0.05,
        distractors: 0,
        distractor_contrast: 0.0,
        distractor_size: [0.1, 0.1],
    }
}

pub fn standard_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec::default(),
        DomainSpec { id: "inverted".into(), invert: true, gain: 1.0, offset: 0.0 },
        DomainSpec { id: "dim".into(), invert: false, gain: 0.7, offset: 0.1 },
    ]
}

/// Disjoint base/novel split for cross-validation fold `fold` of `folds`.
pub fn fold_split(categories: &[CategorySpec], fold: usize, folds: usize) -> Result<(Vec<CategorySpec>, Vec<CategorySpec>)> {
    if folds < 2 || fold >= folds || categories.len() < folds {
        return Err(FobError::InvalidParameter(format!(
            "fold {fold} of {folds} over {} categories",
            categories.len()
        )));
    }
    let (mut base, mut novel) = (Vec::new(), Vec::new());
    for (i, c) in categories.iter().enumerate() {
        if i % folds == fold {
            novel.push(c.clone());
        } else {
            base.push(c.clone());
        }
    }
    Ok((base, novel))
}

/// Deterministic episode source: episode `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pub categories: Vec<CategorySpec>,
    pub domains: Vec<DomainSpec>,
    pub size: (usize, usize),
    pub seed: u64,
}

impl EpisodeSampler {
    pub fn new(categories: Vec<CategorySpec>, size: usize, seed: u64) -> Result<Self> {
        if categories.is_empty() {
            return Err(FobError::InvalidParameter("episode sampler needs at least one category".into()));
        }
        Ok(Self { categories, domains: vec![DomainSpec::default()], size: (size, size), seed })
    }

    pub fn with_domains(mut self, domains: Vec<DomainSpec>) -> Self {
        assert!(!domains.is_empty(), "at least one domain");
        self.domains = domains;
        self
    }

    pub fn category_ids(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.id.clone()).collect()
    }

    /// Episode `i`; placements that fail the area check are redrawn.
    pub fn episode(&self, i: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, i));
        let spec = &self.categories[rng.random_range(0..self.categories.len())];
        let domain = &self.domains[rng.random_range(0..self.domains.len())];
        let mut last = None;
        for attempt in 0..8u64 {
            match generate_episode_in(spec, domain, self.size, sub_seed(rng.random(), attempt)) {
                Ok(e) => return Ok(e),
                Err(e @ FobError::Generation(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Integer superpixel labels over an image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
    pub n_labels: usize,
}

impl LabelMap {
    pub fn mask_of(&self, label: usize) -> BinaryMask {
        BinaryMask::from_vec(self.h, self.w, self.labels.iter().map(|&l| (l == label) as u8).collect())
            .expect("binary by construction")
    }
}

/// Grid dimensions `(ny, nx)` with `ny * nx <= k` seeds.
pub fn slic_grid(h: usize, w: usize, k: usize) -> (usize, usize) {
    let step = ((h * w) as f64 / k as f64).sqrt();
    let mut ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let mut nx = ((w as f64 / step).round() as usize).clamp(1, w);
    while ny * nx > k {
        if ny >= nx {
            ny -= 1;
        } else {
            nx -= 1;
        }
    }
    (ny, nx)
}

/// SLIC superpixels: k-means in joint intensity/position space from a
/// regular grid of seeds. Intensities are scaled by 100 so the compactness
/// `m` has its usual meaning; every centre competes for every pixel.
pub fn slic_pseudolabels(image: &Image, k: usize, m: f64, iters: usize) -> Result<LabelMap> {
    let (h, w) = image.dims();
    if k < 2 {
        return Err(FobError::InvalidParameter("slic needs k >= 2".into()));
    }
    if k > h * w {
        return Err(FobError::InvalidParameter(format!("slic k = {k} exceeds {} pixels", h * w)));
    }
    let ch = image.channels;
    let (ny, nx) = slic_grid(h, w, k);
    let step = ((h * w) as f64 / (ny * nx) as f64).sqrt();
    // centre = (row, col, colour...)
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let r = ((i as f64 + 0.5) * h as f64 / ny as f64).floor().min((h - 1) as f64);
            let c = ((j as f64 + 0.5) * w as f64 / nx as f64).floor().min((w - 1) as f64);
            let mut v = vec![r, c];
            v.extend((0..ch).map(|k| 100.0 * image.get(r as usize, c as usize, k)));
            centres.push(v);
        }
    }
    let spatial = (m / step).powi(2);
    let mut labels = vec![0usize; h * w];
    for _ in 0..iters.max(1) {
        for r in 0..h {
            for c in 0..w {
                let mut best = (f64::INFINITY, 0);
                for (ci, cen) in centres.iter().enumerate() {
                    let ds = (r as f64 - cen[0]).powi(2) + (c as f64 - cen[1]).powi(2);
                    let dc: f64 = (0..ch).map(|k| (100.0 * image.get(r, c, k) - cen[2 + k]).powi(2)).sum();
                    let d = dc + ds * spatial;
                    if d < best.0 {
                        best = (d, ci);
                    }
                }
                labels[r * w + c] = best.1;
            }
        }
        let mut sums = vec![vec![0.0; 2 + ch]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for r in 0..h {
            for c in 0..w {
                let l = labels[r * w + c];
                counts[l] += 1;
                sums[l][0] += r as f64;
                sums[l][1] += c as f64;
                for k in 0..ch {
                    sums[l][2 + k] += 100.0 * image.get(r, c, k);
                }
            }
        }
        for (ci, cen) in centres.iter_mut().enumerate() {
            if counts[ci] > 0 {
                for (x, s) in cen.iter_mut().zip(&sums[ci]) {
                    *x = s / counts[ci] as f64;
                }
            }
        }
    }
    // compact labels so every label id is in use
    let mut remap = BTreeMap::new();
    for &l in &labels {
        let next = remap.len();
        remap.entry(l).or_insert(next);
    }
    let n_labels = remap.len();
    let labels = labels.into_iter().map(|l| remap[&l]).collect();
    Ok(LabelMap { h, w, labels, n_labels })
}

fn shift_image(img: &Image, dr: i64, dc: i64) -> Image {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let sr = (r - dr).clamp(0, h as i64 - 1) as usize;
            let sc = (c - dc).clamp(0, w as i64 - 1) as usize;
            for k in 0..img.channels {
                data.push(img.get(sr, sc, k));
            }
        }
    }
    Image::new(h, w, img.channels, data)
}

fn shift_mask(mask: &BinaryMask, dr: i64, dc: i64) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |r, c| {
        let (sr, sc) = (r as i64 - dr, c as i64 - dc);
        sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 && mask.get(sr as usize, sc as usize)
    })
}

/// Label-free training episode: a random superpixel of `image` is the
/// support mask; the query is a shifted, re-noised copy.
pub fn pseudo_label_episode(image: &Image, k: usize, m: f64, seed: u64) -> Result<Episode> {
    let labels = slic_pseudolabels(image, k, m, 10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<BinaryMask> = (0..labels.n_labels)
        .map(|l| labels.mask_of(l))
        .filter(|mk| (0.01..=0.9).contains(&mk.fraction()))
        .collect();
    if candidates.is_empty() {
        return Err(FobError::Generation("no superpixel has a usable area".into()));
    }
    let support_mask = candidates[rng.random_range(0..candidates.len())].clone();
    let (dr, dc) = (rng.random_range(-2..=2), rng.random_range(-2..=2));
    let noise = Normal::new(0.0, 0.03).expect("sigma");
    let mut query_image = shift_image(image, dr, dc);
    for v in query_image.data.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    let query_mask = shift_mask(&support_mask, dr, dc);
    if query_mask.is_empty() {
        return Err(FobError::Generation("shifted pseudo mask left the image".into()));
    }
    Ok(Episode {
        support_image: image.clone(),
        support_mask,
        query_image,
        query_mask: Some(query_mask),
        category_id: "pseudo".into(),
        domain_id: "pseudo".into(),
        seed,
    })
}

/// One item of a folder dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub stem: String,
    pub image: Image,
    pub mask: BinaryMask,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pgm")) {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(stem, p);
        }
    }
    Ok(out)
}

/// Loads `images/<stem>.png|.pgm` paired with `masks/<stem>.png|.pgm`,
/// resized to `size x size`. Results are sorted by stem.
pub fn load_folder_dataset(root: &Path, size: usize) -> Result<Vec<LabeledImage>> {
    let images = image_files(&root.join("images"))?;
    let masks = image_files(&root.join("masks"))?;
    if let Some((stem, p)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(FobError::Load { path: p.clone(), msg: format!("mask `{stem}` has no matching image") });
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, ip) in images {
        let mp = masks
            .get(&stem)
            .ok_or_else(|| FobError::Load { path: ip.clone(), msg: format!("image `{stem}` has no matching mask") })?;
        let image = Image::load(&ip)?;
        let mask = load_mask(mp)?;
        if mask.dims() != image.dims() {
            return Err(FobError::Load { path: mp.clone(), msg: "mask and image sizes differ".into() });
        }
        out.push(LabeledImage {
            stem,
            image: image.resize_bilinear(size, size),
            mask: resize_mask_nearest(&mask, size, size),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub category_id: String,
    pub domain_id: String,
    pub seed: u64,
    pub support_image: String,
    pub support_mask: String,
    pub query_image: String,
    pub query_mask: Option<String>,
}

/// Writes PNGs for every episode plus `manifest.json`.
pub fn export_episodes(dir: &Path, episodes: &[Episode]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let name = |kind: &str| format!("ep{i:04}_{kind}.png");
        ep.support_image.save_png(&dir.join(name("support")))?;
        save_mask_png(&ep.support_mask, &dir.join(name("support_mask")))?;
        ep.query_image.save_png(&dir.join(name("query")))?;
        let qm = match &ep.query_mask {
            Some(m) => {
                save_mask_png(m, &dir.join(name("query_mask")))?;
                Some(name("query_mask"))
            }
            None => None,
        };
        manifest.push(ManifestEntry {
            index: i,
            category_id: ep.category_id.clone(),
            domain_id: ep.domain_id.clone(),
            seed: ep.seed,
            support_image: name("support"),
            support_mask: name("support_mask"),
            query_image: name("query"),
            query_mask: qm,
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_sized() {
        for spec in standard_categories() {
            let a = generate_episode(&spec, (32, 32), 11);
            let b = generate_episode(&spec, (32, 32), 11);
            assert_eq!(a.as_ref().ok(), b.as_ref().ok(), "{}", spec.id);
        }
        let spec = &standard_categories()[0];
        let e = generate_episode(spec, (64, 64), 3).unwrap();
        for m in [&e.support_mask, e.query_mask.as_ref().unwrap()] {
            assert!((0.01..=0.9).contains(&m.fraction()));
        }
        assert!(generate_episode(spec, (16, 16), 3).is_err());
    }

    #[test]
    fn distractor_touches_boundary() {
        let spec = &standard_categories()[0];
        let e = generate_episode(spec, (64, 64), 5).unwrap();
        // some non-mask pixel adjacent to the mask is rendered near the foreground level
        let m = &e.support_mask;
        let ring = crate::geometry::dilate_mask(m, 3).unwrap().and_not(m);
        let close = ring
            .pixels()
            .iter()
            .filter(|&&(r, c)| (e.support_image.get(r, c, 0) - spec.fg_mean).abs() < 0.2)
            .count();
        assert!(close >= 3, "{close}");
    }

    #[test]
    fn degenerate_spec_rejected() {
        let mut s = clean_category("huge");
        s.axis_a = [0.6, 0.7];
        s.axis_b = [0.6, 0.7];
        assert!(matches!(generate_episode(&s, (32, 32), 0), Err(FobError::Generation(_))));
    }

    #[test]
    fn folds_are_disjoint() {
        let cats = standard_categories();
        for f in 0..5 {
            let (base, novel) = fold_split(&cats, f, 5).unwrap();
            assert_eq!(base.len() + novel.len(), cats.len());
            assert!(novel.iter().all(|n| base.iter().all(|b| b.id != n.id)));
        }
    }

    #[test]
    fn slic_partition_and_grid() {
        assert_eq!(slic_grid(64, 64, 5), (2, 2));
        let img = Image::gray(40, 40, vec![0.5; 1600]);
        let l = slic_pseudolabels(&img, 5, 15.0, 10).unwrap();
        assert!(l.n_labels <= 5);
        assert_eq!(l.labels.len(), 1600);
        for lab in 0..l.n_labels {
            assert!(!l.mask_of(lab).is_empty());
        }
        assert!(slic_pseudolabels(&Image::gray(2, 2, vec![0.0; 4]), 5, 15.0, 10).is_err());
    }

    #[test]
    fn folder_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder_dataset(dir.path(), 32).unwrap().is_empty());
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let e = generate_episode(&standard_categories()[1], (48, 48), 2).unwrap();
        e.support_image.save_png(&dir.path().join("images/a.png")).unwrap();
        save_mask_png(&e.support_mask, &dir.path().join("masks/a.png")).unwrap();
        let ds = load_folder_dataset(dir.path(), 32).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].image.dims(), (32, 32));
        assert!(ds[0].mask.count() > 0);
        e.query_image.save_png(&dir.path().join("images/b.png")).unwrap();
        match load_folder_dataset(dir.path(), 32) {
            Err(FobError::Load { msg, .. }) => assert!(msg.contains("`b`")),
            other => panic!("{other:?}"),
        }
    }
}
