//! Builds label-free training episodes from superpixels: an image is
//! partitioned with SLIC and one superpixel becomes the support mask.
//!
//!     cargo run --release --example pseudo_labels -- [seed] [out_dir]

use std::path::PathBuf;

use fob::episodes::{export_episodes, generate_episode, pseudo_label_episode, slic_pseudolabels, standard_categories};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/example-pseudo".into()));

    let image = generate_episode(&standard_categories()[2], (64, 64), seed)?.support_image;
    let labels = slic_pseudolabels(&image, 5, 15.0, 10)?;
    for l in 0..labels.n_labels {
        let m = labels.mask_of(l);
        println!("superpixel {l}: {} px ({:.1}%)", m.count(), 100.0 * m.fraction());
    }
    let episodes = (0..4).map(|i| pseudo_label_episode(&image, 5, 15.0, seed + i)).collect::<Result<Vec<_>, _>>()?;
    export_episodes(&out, &episodes)?;
    println!("{} pseudo-label episodes in {}", episodes.len(), out.display());
    Ok(())
}
