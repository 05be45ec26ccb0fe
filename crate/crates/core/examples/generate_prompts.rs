//! Runs a trained model on one novel-category episode and prints the prompt
//! set it produces, in the JSON format consumed by external segmenters.
//!
//!     cargo run --release --example generate_prompts -- <checkpoint.json> [episode] [out.png]

use fob::backend::{OracleBackend, SegBackend};
use fob::episodes::{fold_split, standard_categories, EpisodeSampler};
use fob::inference::{infer, InferenceConfig};
use fob::metrics::{dice, fraction_inside, BoundaryDistance};
use fob::model::FobModel;
use fob::overlay::{self, Overlay};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "runs/example-train/checkpoint.json".into());
    let index: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let png = args.next().unwrap_or_else(|| "runs/example-prompts.png".into());

    let model = FobModel::load(ckpt.as_ref())?;
    let (_base, novel) = fold_split(&standard_categories(), 0, 5)?;
    let ep = EpisodeSampler::new(novel, 64, 1000)?.episode(index)?;
    let out = infer(&model, &ep.support_image, &ep.support_mask, &ep.query_image, &InferenceConfig::default(), index)?;
    println!("{}", out.prompts.to_json()?);

    let gt = ep.query_mask.as_ref().expect("synthetic query mask");
    let pred = OracleBackend::default().segment(&ep.query_image, &out.prompts)?;
    println!(
        "category {}: dice {:.4}, bg inside object {:.2}, mean bg distance to boundary {:.2} px",
        ep.category_id,
        dice(&pred, gt)?,
        fraction_inside(&out.prompts.background, gt).unwrap_or(0.0),
        BoundaryDistance::new(gt)?.mean(&out.prompts.background).unwrap_or(f64::NAN),
    );
    let layers = Overlay { prompts: Some(&out.prompts), predicted: Some(&pred), ground_truth: Some(gt) };
    overlay::save(&ep.query_image, &layers, png.as_ref())?;
    Ok(())
}
