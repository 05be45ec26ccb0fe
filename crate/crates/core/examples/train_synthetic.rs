//! Trains a small model on the synthetic base categories and saves a
//! checkpoint.
//!
//!     cargo run --release --example train_synthetic -- [iters] [out_dir]

use std::time::Instant;

use fob::episodes::{fold_split, standard_categories, EpisodeSampler};
use fob::losses::LossConfig;
use fob::model::{FobModel, ModelConfig};
use fob::train::{train, TrainConfig, TrainOutputs};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let out = args.next().unwrap_or_else(|| "runs/example-train".into());

    let mut cfg = ModelConfig::default();
    cfg.encoder.size = 32;
    cfg.encoder.channels = 16;
    cfg.ffn_hidden = 32;
    cfg.bppc.r = 7;
    cfg.bppc.sigma = 2.0;
    let mut model = FobModel::new(cfg, 0)?;

    let (base, _novel) = fold_split(&standard_categories(), 0, 5)?;
    let sampler = EpisodeSampler::new(base, 32, 1)?;
    let tcfg = TrainConfig { iterations: iters, lr: 1e-3, ..TrainConfig::default() };
    let start = Instant::now();
    let rows = train(&mut model, &sampler, &tcfg, &LossConfig::default(), Some(&TrainOutputs { dir: out.clone().into() }))?;
    let secs = start.elapsed().as_secs_f64();
    for r in rows.iter().step_by((iters / 10).max(1)) {
        println!("iter {:5}  rac {:.4}  heat {:.6}  coor {:.2}  fore {:.4}  total {:.4}", r.iter, r.l_rac, r.l_heat, r.l_coor, r.l_fore, r.l_total);
    }
    println!("{iters} iterations in {secs:.1}s ({:.3}s/iter); checkpoint in {out}", secs / iters as f64);
    Ok(())
}
