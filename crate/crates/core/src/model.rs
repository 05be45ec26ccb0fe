//! The full prompt generator: encoder, prototype construction, context
//! modelling and refinement wired together, plus checkpoint I/O.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bcm::{extract_coarse_prompts, Bcm, BcmOutput};
use crate::bppc::{mask_pooling_weights, point_pooling_weights, pool, support_prompts, BppcConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{FobError, Result, StageExt};
use crate::geometry::{gaussian_stack, BinaryMask, Point2D};
use crate::losses::{
    coord_loss_var, foreground_loss_var, heatmap_loss_var, positive_weights, rac_loss_var, LossConfig, LossVars,
};
use crate::params::{Binding, ParamStore};
use crate::raster::Image;
use crate::spr::{points_to_matrix, Spr, SprConfig, SprOutput};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bppc: BppcConfig,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub spr: SprConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let ffn_hidden = 2 * encoder.channels;
        Self { encoder, bppc: BppcConfig::default(), heads: 4, ffn_hidden, spr: SprConfig::default() }
    }
}

impl ModelConfig {
    pub fn size(&self) -> usize {
        self.encoder.size
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels
    }

    pub fn n_prompts(&self) -> usize {
        self.bppc.n_prompts
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.spr.validate()?;
        let b = &self.bppc;
        if b.r % 2 == 0 || b.eps % 2 == 1 || b.eps >= b.r || b.eps == 0 {
            return Err(FobError::InvalidParameter(format!(
                "ring needs odd r and even 0 < eps < r, got r={} eps={}",
                b.r, b.eps
            )));
        }
        if b.n_prompts == 0 || !(b.sigma > 0.0) {
            return Err(FobError::InvalidParameter("need n_prompts >= 1 and sigma > 0".into()));
        }
        if self.heads == 0 || self.channels() % self.heads != 0 {
            return Err(FobError::InvalidParameter(format!(
                "{} heads do not divide {} channels",
                self.heads,
                self.channels()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FobModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub bcm: Bcm,
    /// `None` when the model was configured without refinement.
    pub spr: Option<Spr>,
}

/// Tape nodes and intermediate results of one episode forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub f_s: Var,
    pub f_q: Var,
    pub support_points: Vec<Point2D>,
    /// `N_p x C` background prototypes.
    pub prototypes: Var,
    /// `1 x C` support foreground prototype.
    pub p_fg: Var,
    pub bcm: BcmOutput,
    pub coarse: Vec<Point2D>,
    pub spr: Option<SprOutput>,
    /// `N_p x 2` output coordinates: refined, or the coarse points as a
    /// constant when refinement is off.
    pub refined: Var,
}

/// Everything inference needs from a forward pass, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub support_points: Vec<Point2D>,
    pub coarse: Vec<Point2D>,
    pub refined: Vec<Point2D>,
    /// `h*w` calibrated foreground correlation.
    pub calibrated: Vec<f64>,
    /// `N_p x (h*w)` predicted heatmaps.
    pub heatmaps: Array2<f64>,
}

impl FobModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels();
        let np = cfg.n_prompts();
        let encoder = Encoder::new(&mut store, &mut rng, cfg.encoder.clone())?;
        let bcm = Bcm::new(&mut store, &mut rng, c, np, cfg.heads, cfg.ffn_hidden)?;
        let spr = if cfg.spr.enabled { Some(Spr::new(&mut store, &mut rng, cfg.spr, c, np)?) } else { None };
        Ok(Self { cfg, store, encoder, bcm, spr })
    }

    fn check_inputs(&self, image: &Image, mask: Option<&BinaryMask>, what: &str) -> Result<()> {
        let s = self.cfg.size();
        if image.dims() != (s, s) {
            return Err(FobError::Shape(format!("{what} image is {}x{}, model expects {s}x{s}", image.h, image.w)));
        }
        if let Some(m) = mask {
            if m.dims() != (s, s) {
                return Err(FobError::Shape(format!("{what} mask does not match the working size {s}")));
            }
            if m.is_empty() {
                return Err(FobError::EmptyMask);
            }
        }
        Ok(())
    }

    /// Runs encode, prototype construction, context modelling and refinement.
    pub fn forward(
        &self,
        t: &mut Tape,
        b: &Binding,
        support_image: &Image,
        support_mask: &BinaryMask,
        query_image: &Image,
        support_seed: u64,
    ) -> Result<Forward> {
        self.check_inputs(support_image, Some(support_mask), "support")?;
        self.check_inputs(query_image, None, "query")?;
        let s = self.cfg.size();
        let f_s = self.encoder.encode_image(t, b, support_image).stage("encoder")?;
        let f_q = self.encoder.encode_image(t, b, query_image).stage("encoder")?;

        let support_points = support_prompts(support_mask, &self.cfg.bppc, support_seed).stage("bppc")?;
        let pw = point_pooling_weights(&support_points, self.cfg.bppc.sigma, s, s).stage("bppc")?;
        let prototypes = pool(t, f_s, &pw);
        let p_fg = pool(t, f_s, &mask_pooling_weights(support_mask).stage("bppc")?);

        let bcm = self.bcm.forward(t, b, f_q, prototypes, p_fg, s, s).stage("bcm")?;
        let coarse = extract_coarse_prompts(t.value(bcm.heatmaps), s, s);

        let (spr, refined) = match &self.spr {
            Some(module) => {
                let qw = point_pooling_weights(&coarse, self.cfg.bppc.sigma, s, s).stage("spr")?;
                let q = pool(t, f_q, &qw);
                let out = module.forward(t, b, prototypes, q, &coarse, f_q, s, s).stage("spr")?;
                let refined = out.refined;
                (Some(out), refined)
            }
            None => (None, t.constant(points_to_matrix(&coarse))),
        };
        Ok(Forward { f_s, f_q, support_points, prototypes, p_fg, bcm, coarse, spr, refined })
    }

    /// Eval-mode forward pass with frozen parameters.
    pub fn predict(
        &self,
        support_image: &Image,
        support_mask: &BinaryMask,
        query_image: &Image,
        support_seed: u64,
    ) -> Result<Prediction> {
        let mut t = Tape::new();
        let b = self.store.bind_frozen(&mut t);
        let fw = self.forward(&mut t, &b, support_image, support_mask, query_image, support_seed)?;
        let refined = crate::spr::matrix_to_points(t.value(fw.refined));
        if refined.iter().any(|p| !p.is_finite()) {
            return Err(FobError::Stage { stage: "spr", source: Box::new(FobError::Shape("non-finite refined prompt".into())) });
        }
        Ok(Prediction {
            support_points: fw.support_points,
            coarse: fw.coarse,
            refined,
            calibrated: t.value(fw.bcm.suppressed.calibrated).iter().copied().collect(),
            heatmaps: t.value(fw.bcm.heatmaps).clone(),
        })
    }

    /// Ground-truth query prompts: the query ring sampled and ordered the same
    /// way as the support prompts.
    pub fn target_points(&self, query_mask: &BinaryMask, seed: u64) -> Result<Vec<Point2D>> {
        support_prompts(query_mask, &self.cfg.bppc, seed)
    }

    /// Builds the four loss terms for a training episode.
    pub fn losses(
        &self,
        t: &mut Tape,
        fw: &Forward,
        support_mask: &BinaryMask,
        query_mask: &BinaryMask,
        target: &[Point2D],
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        let s = self.cfg.size();
        let pos_w = positive_weights(support_mask, cfg.erosion).stage("losses")?;
        let p_pos = pool(t, fw.f_s, &pos_w);
        let rac = rac_loss_var(t, fw.p_fg, p_pos, fw.prototypes, cfg.tau, cfg.rac_include_positive_in_denominator)
            .stage("losses")?;
        let h_gt = t.constant(gaussian_stack(target, self.cfg.bppc.sigma, s, s)?);
        let heat = heatmap_loss_var(t, fw.bcm.proposals, fw.bcm.heatmaps, h_gt)?;
        // without refinement there is nothing for the coordinate term to train
        let coor = if fw.spr.is_some() {
            let gt = t.constant(points_to_matrix(target));
            coord_loss_var(t, fw.refined, gt)?
        } else {
            t.scalar_constant(0.0)
        };
        let fore = foreground_loss_var(t, fw.bcm.suppressed.calibrated, query_mask)?;
        Ok(LossVars { rac, heat, coor, fore })
    }

    pub fn to_checkpoint(&self, iteration: Option<usize>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            iteration,
            config: self.cfg.clone(),
            params: self
                .store
                .iter()
                .map(|(name, v)| ParamRecord { name: name.to_string(), shape: [v.nrows(), v.ncols()], data: v.iter().copied().collect() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(FobError::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        let mut model = FobModel::new(ck.config.clone(), 0)?;
        if ck.params.len() != model.store.len() {
            return Err(FobError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for rec in &ck.params {
            let id = model
                .store
                .find(&rec.name)
                .ok_or_else(|| FobError::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            let slot = model.store.get_mut(id);
            if slot.dim() != (rec.shape[0], rec.shape[1]) || rec.data.len() != rec.shape[0] * rec.shape[1] {
                return Err(FobError::Checkpoint(format!("shape mismatch for `{}`", rec.name)));
            }
            *slot = Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone()).expect("checked shape");
        }
        if !model.store.all_finite() {
            return Err(FobError::Checkpoint("checkpoint contains non-finite values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, iteration: Option<usize>) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string(&self.to_checkpoint(iteration))?;
        // write-then-rename so an interrupted save never clobbers the previous file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FobError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| FobError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ck)
    }

    /// Errors when a run configuration disagrees with this model on the
    /// quantities that fix parameter shapes.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let mine = &self.cfg;
        let mut diffs = Vec::new();
        if mine.channels() != other.channels() {
            diffs.push(format!("channels C: checkpoint {} vs config {}", mine.channels(), other.channels()));
        }
        if mine.n_prompts() != other.n_prompts() {
            diffs.push(format!("prompts N_p: checkpoint {} vs config {}", mine.n_prompts(), other.n_prompts()));
        }
        if mine.size() != other.size() {
            diffs.push(format!("working size: checkpoint {} vs config {}", mine.size(), other.size()));
        }
        if mine.spr.enabled != other.spr.enabled {
            diffs.push(format!("refinement: checkpoint {} vs config {}", mine.spr.enabled, other.spr.enabled));
        }
        if mine.spr.k != other.spr.k {
            diffs.push(format!("offsets k: checkpoint {} vs config {}", mine.spr.k, other.spr.k));
        }
        if mine.encoder.depth != other.encoder.depth || mine.ffn_hidden != other.ffn_hidden || mine.heads != other.heads {
            diffs.push("encoder depth / attention shape differ".into());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(FobError::Checkpoint(format!("checkpoint does not match config: {}", diffs.join("; "))))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub iteration: Option<usize>,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}
