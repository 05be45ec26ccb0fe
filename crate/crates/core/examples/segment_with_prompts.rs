//! Shows the over-segmentation failure and its repair on one synthetic
//! episode: the oracle segmenter is run with foreground points only, then
//! again with background points sampled on a ring around the object.
//!
//!     cargo run --release --example segment_with_prompts -- [seed] [out_dir]

use std::path::PathBuf;

use fob::backend::{OracleBackend, SegBackend};
use fob::episodes::{generate_episode, standard_categories};
use fob::geometry::{differential_ring, sample_points};
use fob::inference::PromptSet;
use fob::metrics::dice;
use fob::overlay::{self, Overlay};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/example-segment".into()));
    std::fs::create_dir_all(&out)?;

    let spec = &standard_categories()[0];
    let ep = generate_episode(spec, (64, 64), seed)?;
    let gt = ep.query_mask.as_ref().expect("synthetic episodes carry a query mask");
    let backend = OracleBackend::default();

    let fg = sample_points(gt, 10, seed)?;
    let bg = sample_points(&differential_ring(gt, 15, 2)?, 10, seed + 1)?;
    let with_bg = PromptSet { image_size: [64, 64], foreground: fg.clone(), background: bg };
    let fg_only = with_bg.without_background();

    for (name, prompts) in [("fg_only", &fg_only), ("with_bg", &with_bg)] {
        let pred = backend.segment(&ep.query_image, prompts)?;
        println!("{name:8} dice {:.4}  predicted {} px, object {} px", dice(&pred, gt)?, pred.count(), gt.count());
        let layers = Overlay { prompts: Some(prompts), predicted: Some(&pred), ground_truth: Some(gt) };
        overlay::save(&ep.query_image, &layers, &out.join(format!("{name}.png")))?;
    }
    println!("overlays in {}", out.display());
    Ok(())
}
