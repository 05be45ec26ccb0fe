//! Evaluates a checkpoint on novel-category episodes with every prompt
//! variant through the oracle backend.
//!
//!     cargo run --release --example evaluate -- <checkpoint.json> [episodes]

use fob::backend::OracleBackend;
use fob::episodes::{fold_split, standard_categories, EpisodeSampler};
use fob::eval::{evaluate_variants, EvalConfig, PromptVariant};
use fob::model::FobModel;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "runs/example-train/checkpoint.json".into());
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let model = FobModel::load(ckpt.as_ref())?;
    let (_base, novel) = fold_split(&standard_categories(), 0, 5)?;
    let sampler = EpisodeSampler::new(novel, model.cfg.size(), 99)?;
    let cfg = EvalConfig { n_episodes: n, r: model.cfg.bppc.r, eps: model.cfg.bppc.eps, n_bg: model.cfg.n_prompts(), ..EvalConfig::default() };
    let reports = evaluate_variants(Some(&model), &sampler, &OracleBackend::default(), &cfg, &PromptVariant::ALL)?;
    for rep in reports {
        let m = &rep.mean;
        println!(
            "{:<14} dice {:.4}  bg_inside {}  bg_boundary {}  ring_residual {}",
            rep.variant.name(),
            m.dice,
            m.bg_inside.map_or("-".into(), |v| format!("{v:.3}")),
            m.bg_boundary.map_or("-".into(), |v| format!("{v:.3}")),
            m.ring_residual.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
    Ok(())
}
