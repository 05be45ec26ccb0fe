//! Writes one synthetic episode per category as PNGs with a manifest, and
//! lists the cross-validation folds.
//!
//!     cargo run --release --example export_episodes -- [out_dir] [size]

use std::path::PathBuf;

use fob::episodes::{export_episodes, fold_split, generate_episode, standard_categories};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/example-episodes".into()));
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);

    let cats = standard_categories();
    for fold in 0..5 {
        let (_, novel) = fold_split(&cats, fold, 5)?;
        println!("fold {fold}: novel {:?}", novel.iter().map(|c| c.id.as_str()).collect::<Vec<_>>());
    }
    let episodes = cats.iter().enumerate().map(|(i, c)| generate_episode(c, (size, size), i as u64)).collect::<Result<Vec<_>, _>>()?;
    for e in export_episodes(&out, &episodes)? {
        println!("{} -> {} / {}", e.category_id, e.support_image, e.query_image);
    }
    Ok(())
}
