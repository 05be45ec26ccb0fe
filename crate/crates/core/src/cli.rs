//! The `fob` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::{backend_from_spec, OracleBackend, SegBackend};
use crate::config::{resolve_output, RunConfig};
use crate::episodes::{export_episodes, sub_seed};
use crate::error::FobError;
use crate::eval::{evaluate_variants, variant_prompts, PromptVariant};
use crate::inference::{infer, PromptSet};
use crate::model::FobModel;
use crate::overlay::{self, Overlay};
use crate::raster::{load_mask, save_mask_png, Image};
use crate::train::{train, TrainOutputs};

#[derive(Debug, Parser)]
#[command(name = "fob", version, about = "Background point-prompt generation for one-shot segmentation")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train on synthetic base categories.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out categories.
    Eval(EvalArgs),
    /// Write a prompt-set JSON for every query image in a folder.
    GenPrompts(GenArgs),
    /// Draw prompts and contours over an image.
    Render(RenderArgs),
    /// Export synthetic episodes as PNG files.
    Episodes(EpisodesArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set spr.kappa=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `output_dir` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoBgPrompts,
    NoSpr,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// `oracle` or `external:<url>`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, value_enum, conflicts_with = "variant")]
    pub ablate: Option<Ablation>,
    /// Prompt source: full, no-bg-prompts, no-spr, confidence, coarse-mask,
    /// ground-truth or random.
    #[arg(long)]
    pub variant: Option<String>,
    /// Render overlays for the first N episodes.
    #[arg(long, default_value_t = 0)]
    pub overlays: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub support_image: PathBuf,
    #[arg(long)]
    pub support_mask: PathBuf,
    /// Folder of query images (`.png` / `.pgm`).
    #[arg(long)]
    pub queries: PathBuf,
    /// Only process files whose name ends with this suffix.
    #[arg(long)]
    pub suffix: Option<String>,
    /// Also write overlay PNGs.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Predicted mask to outline.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Ground-truth mask to outline.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Segment the image from the prompts with the oracle backend and
    /// outline the result (also saved next to the output as `*_mask.png`).
    #[arg(long, requires = "prompts")]
    pub segment: bool,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Args)]
pub struct EpisodesArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = Split::Novel)]
    pub split: Split,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(FobError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<FobError> for CliError {
    fn from(e: FobError) -> Self {
        match e {
            FobError::Config(_) | FobError::InvalidParameter(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

impl ConfigArgs {
    /// Loads the file (if any), applies overrides and the seed flag.
    fn resolve(&self, required: bool) -> CliResult<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides).map_err(|e| match e {
                FobError::Load { path, msg } => CliError::Usage(format!("cannot read config {}: {msg}", path.display())),
                other => other.into(),
            }),
            None if required => Err(CliError::Usage("--config is required".into())),
            None => Ok(RunConfig::from_toml("", &overrides)?),
        }
    }

    fn out_dir(&self, cfg: &RunConfig, sub: Option<&str>) -> PathBuf {
        match &self.out {
            Some(p) => resolve_output(p),
            None => {
                let base = cfg.resolved_output_dir();
                sub.map_or(base.clone(), |s| base.join(s))
            }
        }
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = a.cfg.resolve(true)?;
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
        cfg.validate()?;
    }
    let out = a.cfg.out_dir(&cfg, None);
    cfg.write_snapshot(&out)?;
    let mut model = FobModel::new(cfg.model(), sub_seed(cfg.seed, 0))?;
    let sampler = cfg.train_sampler()?;
    let outputs = TrainOutputs { dir: out.clone() };
    let rows = train(&mut model, &sampler, &cfg.train_config(), &cfg.loss, Some(&outputs))?;
    if let Some(last) = rows.last() {
        println!("trained {} iterations; final L_total {:.6}", last.iter, last.l_total);
    }
    println!("checkpoint: {}", outputs.checkpoint().display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let mut cfg = a.cfg.resolve(true)?;
    if let Some(b) = &a.backend {
        cfg.backend = b.clone();
    }
    if let Some(n) = a.episodes {
        cfg.data.eval_episodes = n;
    }
    cfg.validate()?;
    let variant = match (a.ablate, &a.variant) {
        (Some(Ablation::NoBgPrompts), _) => PromptVariant::NoBgPrompts,
        (Some(Ablation::NoSpr), _) => PromptVariant::NoSpr,
        (None, Some(v)) => v.parse()?,
        (None, None) => PromptVariant::Full,
    };
    let model = FobModel::load(&a.checkpoint)?;
    model.check_compatible(&cfg.model()).map_err(|e| CliError::Usage(e.to_string()))?;
    let backend = backend_from_spec(&cfg.backend, cfg.oracle)?;
    let sampler = cfg.eval_sampler()?;
    let eval_cfg = cfg.eval_config();
    let out = a.cfg.out_dir(&cfg, Some("eval"));
    cfg.write_snapshot(&out)?;
    let report = evaluate_variants(Some(&model), &sampler, backend.as_ref(), &eval_cfg, &[variant])?.remove(0);
    report.write(&out, "report")?;
    print!("{}", report.table());
    if a.overlays > 0 {
        let dir = out.join("overlays");
        std::fs::create_dir_all(&dir).map_err(FobError::from)?;
        for i in 0..a.overlays.min(eval_cfg.n_episodes) {
            let ep = sampler.episode(i as u64)?;
            let seed = sub_seed(eval_cfg.seed, i as u64);
            let o = infer(&model, &ep.support_image, &ep.support_mask, &ep.query_image, &eval_cfg.inference, seed)?;
            let prompts = variant_prompts(variant, &ep, Some(&o), &eval_cfg, sub_seed(seed, 2))?;
            let pred = backend.segment(&ep.query_image, &prompts)?;
            let layers = Overlay { prompts: Some(&prompts), predicted: Some(&pred), ground_truth: ep.query_mask.as_ref() };
            overlay::save(&ep.query_image, &layers, &dir.join(format!("ep{i:04}.png")))?;
        }
    }
    Ok(())
}

fn query_files(dir: &Path, suffix: Option<&str>) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot read query folder {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            matches!(ext.as_deref(), Some("png" | "pgm")) && suffix.is_none_or(|s| name.ends_with(s))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_gen_prompts(a: &GenArgs) -> CliResult<()> {
    let cfg = a.cfg.resolve(false)?;
    let model = FobModel::load(&a.checkpoint)?;
    let support_image = Image::load(&a.support_image)?;
    let support_mask = load_mask(&a.support_mask)?;
    let files = query_files(&a.queries, a.suffix.as_deref())?;
    let out = a.cfg.out_dir(&cfg, Some("prompts"));
    cfg.write_snapshot(&out)?;
    let mut failed = 0usize;
    for (i, path) in files.iter().enumerate() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("query").to_string();
        let result = (|| -> crate::error::Result<()> {
            let query = Image::load(path)?;
            let o = infer(&model, &support_image, &support_mask, &query, &cfg.inference, sub_seed(cfg.seed, i as u64))?;
            o.prompts.save(&out.join(format!("{stem}.json")))?;
            if a.overlays {
                let layers = Overlay { prompts: Some(&o.prompts), ..Overlay::default() };
                overlay::save(&query, &layers, &out.join(format!("{stem}_overlay.png")))?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            log::error!("{}: {e}", path.display());
            failed += 1;
        }
    }
    println!("wrote {} prompt sets to {}", files.len() - failed, out.display());
    if failed > 0 {
        return Err(CliError::Runtime(FobError::Stage {
            stage: "gen-prompts",
            source: Box::new(FobError::InvalidParameter(format!("{failed} of {} queries failed", files.len()))),
        }));
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> CliResult<()> {
    let image = Image::load(&a.image)?;
    let prompts = a.prompts.as_deref().map(PromptSet::load).transpose()?;
    let mut predicted = a.mask.as_deref().map(load_mask).transpose()?;
    let gt = a.gt.as_deref().map(load_mask).transpose()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(FobError::from)?;
    }
    if a.segment {
        let p = prompts.as_ref().expect("clap requires --prompts").rescaled(image.dims());
        let m = OracleBackend::default().segment(&image, &p)?;
        save_mask_png(&m, &a.out.with_file_name(format!(
            "{}_mask.png",
            a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("render")
        )))?;
        predicted = Some(m);
    }
    let layers = Overlay { prompts: prompts.as_ref(), predicted: predicted.as_ref(), ground_truth: gt.as_ref() };
    overlay::save(&image, &layers, &a.out)?;
    Ok(())
}

fn cmd_episodes(a: &EpisodesArgs) -> CliResult<()> {
    let cfg = a.cfg.resolve(false)?;
    let sampler = match a.split {
        Split::Base => cfg.train_sampler()?,
        Split::Novel => cfg.eval_sampler()?,
    };
    let episodes = (0..a.count).map(|i| sampler.episode(i as u64)).collect::<crate::error::Result<Vec<_>>>()?;
    let out = a.cfg.out_dir(&cfg, Some("episodes"));
    cfg.write_snapshot(&out)?;
    export_episodes(&out, &episodes)?;
    println!("exported {} episodes to {}", episodes.len(), out.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GenPrompts(a) => cmd_gen_prompts(a),
        Command::Render(a) => cmd_render(a),
        Command::Episodes(a) => cmd_episodes(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
