//! Run configuration: one TOML file, dotted-path overrides, and the resolved
//! snapshot written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::OracleConfig;
use crate::bppc::BppcConfig;
use crate::encoder::EncoderConfig;
use crate::episodes::{fold_split, standard_categories, standard_domains, sub_seed, EpisodeSampler};
use crate::error::{FobError, Result};
use crate::eval::EvalConfig;
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::spr::SprConfig;
use crate::train::TrainConfig;

/// Environment variable that, when set, roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FOB_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcmConfig {
    pub heads: usize,
    /// Defaults to twice the channel count.
    pub ffn_hidden: Option<usize>,
}

impl Default for BcmConfig {
    fn default() -> Self {
        Self { heads: 4, ffn_hidden: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cross-validation fold whose categories are held out.
    pub fold: usize,
    pub folds: usize,
    /// Intensity domains by id (`plain`, `inverted`, `dim`).
    pub domains: Vec<String>,
    /// Seed of the evaluation episode stream, kept apart from the run seed
    /// so runs with different seeds are scored on the same episodes.
    pub eval_seed: u64,
    pub eval_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { fold: 0, folds: 5, domains: vec!["plain".into()], eval_seed: 1000, eval_episodes: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `oracle` or `external:<url>`.
    pub backend: String,
    pub encoder: EncoderConfig,
    pub bppc: BppcConfig,
    pub bcm: BcmConfig,
    pub spr: SprConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            backend: "oracle".into(),
            encoder: EncoderConfig::default(),
            bppc: BppcConfig::default(),
            bcm: BcmConfig::default(),
            spr: SprConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            data: DataConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {text}")).map(|w| w.v).unwrap_or_else(|_| toml::Value::String(text.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| FobError::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(FobError::Config(format!("override `{assignment}` has an empty key")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| FobError::Config(format!("override `{assignment}`: `{k}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| FobError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| FobError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FobError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            FobError::Config(msg) => FobError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FobError::Config(e.to_string()))
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: FobError| FobError::Config(format!("{name}: {e}"));
        self.model().validate().map_err(|e| field("model", e))?;
        self.loss.validate().map_err(|e| field("loss", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        if !(self.inference.threshold >= 0.0 && self.inference.threshold <= 1.0) || self.inference.n_fg == 0 {
            return Err(FobError::Config("inference: need n_fg >= 1 and threshold in [0, 1]".into()));
        }
        self.domains().map_err(|e| field("data.domains", e))?;
        fold_split(&standard_categories(), self.data.fold, self.data.folds).map_err(|e| field("data", e))?;
        crate::backend::backend_from_spec(&self.backend, self.oracle).map_err(|e| field("backend", e))?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            bppc: self.bppc,
            heads: self.bcm.heads,
            ffn_hidden: self.bcm.ffn_hidden.unwrap_or(2 * self.encoder.channels),
            spr: self.spr,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: sub_seed(self.seed, 2), ..self.train.clone() }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.data.eval_episodes,
            seed: self.seed,
            inference: self.inference,
            r: self.bppc.r,
            eps: self.bppc.eps,
            n_bg: self.bppc.n_prompts,
        }
    }

    fn domains(&self) -> Result<Vec<crate::episodes::DomainSpec>> {
        let all = standard_domains();
        self.data
            .domains
            .iter()
            .map(|id| {
                all.iter().find(|d| &d.id == id).cloned().ok_or_else(|| FobError::InvalidParameter(format!("unknown domain `{id}`")))
            })
            .collect()
    }

    /// Base-category episodes for training.
    pub fn train_sampler(&self) -> Result<EpisodeSampler> {
        let (base, _) = fold_split(&standard_categories(), self.data.fold, self.data.folds)?;
        Ok(EpisodeSampler::new(base, self.encoder.size, sub_seed(self.seed, 1))?.with_domains(self.domains()?))
    }

    /// Held-out novel-category episodes for evaluation.
    pub fn eval_sampler(&self) -> Result<EpisodeSampler> {
        let (_, novel) = fold_split(&standard_categories(), self.data.fold, self.data.folds)?;
        Ok(EpisodeSampler::new(novel, self.encoder.size, self.data.eval_seed)?.with_domains(self.domains()?))
    }

    /// `output_dir`, rooted at `$FOB_OUTPUT_ROOT` when it is relative and
    /// the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
