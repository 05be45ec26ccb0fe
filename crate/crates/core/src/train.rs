//! Episodic training loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::episodes::{pseudo_label_episode, sub_seed, Episode, EpisodeSampler};
use crate::error::{FobError, Result};
use crate::losses::{LossConfig, LossParts};
use crate::model::FobModel;
use crate::params::Adam;

/// Where training masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Ground-truth masks of the base categories.
    Labels,
    /// Superpixel pseudo-masks; no class labels are used.
    Superpixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub iterations: usize,
    pub batch_size: usize,
    /// Set by the caller, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub supervision: Supervision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.95,
            decay_every: 1000,
            iterations: 500,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 0,
            supervision: Supervision::Labels,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return Err(FobError::InvalidParameter("lr must be > 0, decay in (0, 1], decay_every >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(FobError::InvalidParameter("iterations must be >= 1".into()));
        }
        if self.batch_size != 1 {
            return Err(FobError::InvalidParameter("only batch_size = 1 is supported".into()));
        }
        Ok(())
    }

    /// Step schedule: `lr * decay^floor(iter / decay_every)`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr * self.decay.powi((iter / self.decay_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    #[serde(rename = "L_rac")]
    pub l_rac: f64,
    #[serde(rename = "L_heat")]
    pub l_heat: f64,
    #[serde(rename = "L_coor")]
    pub l_coor: f64,
    #[serde(rename = "L_fore")]
    pub l_fore: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
}

/// Output locations for a training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FobError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| FobError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// The training episode for iteration `iter`.
pub fn training_episode(sampler: &EpisodeSampler, cfg: &TrainConfig, iter: usize) -> Result<Episode> {
    match cfg.supervision {
        Supervision::Labels => sampler.episode(iter as u64),
        Supervision::Superpixels => {
            let base = sampler.episode(iter as u64)?;
            let mut last = None;
            for attempt in 0..4 {
                match pseudo_label_episode(&base.support_image, 5, 15.0, sub_seed(base.seed, attempt)) {
                    Ok(e) => return Ok(e),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("attempted"))
        }
    }
}

/// One optimisation step; returns the loss parts before the update.
pub fn train_step(
    model: &mut FobModel,
    adam: &mut Adam,
    episode: &Episode,
    loss_cfg: &LossConfig,
    lr: f64,
    seed: u64,
    iter: usize,
) -> Result<LossParts> {
    let query_mask = episode
        .query_mask
        .as_ref()
        .ok_or_else(|| FobError::InvalidParameter("training episode lacks a query mask".into()))?;
    let mut t = Tape::new();
    let b = model.store.bind(&mut t);
    let fw = model.forward(&mut t, &b, &episode.support_image, &episode.support_mask, &episode.query_image, sub_seed(seed, 0))?;
    let target = model.target_points(query_mask, sub_seed(seed, 1))?;
    let lv = model.losses(&mut t, &fw, &episode.support_mask, query_mask, &target, loss_cfg)?;
    let parts = lv.parts(&t);
    parts.check_finite(iter)?;
    let total = lv.total(&mut t, loss_cfg);
    let mut grads = t.backward(total);
    let g = b.collect(&mut grads, &model.store);
    if g.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(FobError::Divergence { term: "gradient".into(), iter });
    }
    adam.step(&mut model.store, &g, lr);
    if !model.store.all_finite() {
        return Err(FobError::Divergence { term: "parameters".into(), iter });
    }
    Ok(parts)
}

/// Trains for `cfg.iterations` episodes. With `outputs`, writes the metric
/// log and checkpoints; on divergence the last good parameters are saved
/// before the error is returned.
pub fn train(
    model: &mut FobModel,
    sampler: &EpisodeSampler,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir)?;
    }
    let mut adam = Adam::new(&model.store);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for iter in 1..=cfg.iterations {
        let lr = cfg.lr_at(iter);
        let episode = training_episode(sampler, cfg, iter)?;
        let backup = model.store.clone();
        match train_step(model, &mut adam, &episode, loss_cfg, lr, sub_seed(cfg.seed, iter as u64), iter) {
            Ok(p) => {
                let l_total = p.rac + loss_cfg.lambda1 * p.heat + loss_cfg.lambda2 * p.coor + p.fore;
                rows.push(LogRow { iter, l_rac: p.rac, l_heat: p.heat, l_coor: p.coor, l_fore: p.fore, l_total, lr });
                log::debug!("iter {iter} total {l_total:.5}");
            }
            Err(e @ FobError::Divergence { .. }) => {
                model.store = backup;
                if let Some(o) = outputs {
                    model.save(&o.checkpoint(), Some(iter - 1))?;
                    write_log(&o.metrics(), &rows)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if let Some(o) = outputs {
            if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 && iter < cfg.iterations {
                model.save(&o.checkpoint(), Some(iter))?;
                write_log(&o.metrics(), &rows)?;
            }
        }
    }
    if let Some(o) = outputs {
        model.save(&o.checkpoint(), Some(cfg.iterations))?;
        write_log(&o.metrics(), &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(999), 1e-4);
        assert!((cfg.lr_at(2500) - 9.025e-5).abs() < 1e-18);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { batch_size: 2, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
