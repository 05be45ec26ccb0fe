//! Runs the oracle backend with prompts derived from the ground truth:
//! ring background points (upper bound), foreground only, and background
//! points scattered anywhere (lower bound).
//!
//!     cargo run --release --example oracle_bounds -- [episodes] [r]

use fob::backend::OracleBackend;
use fob::episodes::{fold_split, standard_categories, sub_seed, EpisodeSampler};
use fob::eval::{score, variant_prompts, EvalConfig, PromptVariant, Report};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let r: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let (_base, novel) = fold_split(&standard_categories(), 0, 5)?;
    let sampler = EpisodeSampler::new(novel, 32, 99)?;
    let cfg = EvalConfig { n_episodes: n, r, ..EvalConfig::default() };
    let backend = OracleBackend::default();

    let mut rows: [Vec<_>; 3] = Default::default();
    for i in 0..n {
        let ep = sampler.episode(i as u64)?;
        let seed = sub_seed(cfg.seed, i as u64);
        let gt = variant_prompts(PromptVariant::GroundTruth, &ep, None, &cfg, seed)?;
        let random = variant_prompts(PromptVariant::Random, &ep, None, &cfg, seed)?;
        rows[0].push(score(i, &ep, &gt, &backend, &cfg)?);
        rows[1].push(score(i, &ep, &gt.without_background(), &backend, &cfg)?);
        rows[2].push(score(i, &ep, &random, &backend, &cfg)?);
    }
    for (name, recs) in ["ring background", "foreground only", "random background"].iter().zip(rows) {
        let rep = Report::from_records(PromptVariant::GroundTruth, "oracle", cfg.seed, recs)?;
        println!("== {name}\n{}", rep.table());
    }
    Ok(())
}
