//! Drives the `fob` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
seed = 3
output_dir = "runs/tiny"

[encoder]
size = 32
channels = 8
depth = 2

[bppc]
r = 7
sigma = 2.0

[bcm]
heads = 2

[train]
lr = 0.001
iterations = 3

[data]
eval_episodes = 4
"#;

pub fn fob(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fob"))
        .args(args)
        .current_dir(cwd)
        .env_remove(fob::config::OUTPUT_ROOT_ENV)
        .output()
        .expect("spawn fob")
}

/// Runs `fob` and panics with its stderr unless it exits 0.
pub fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = fob(cwd, args);
    assert!(out.status.success(), "fob {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file below `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs every subcommand twice at a fixed seed in `work` and reports, per
/// command, whether the two output trees are byte-identical (and non-empty).
pub fn determinism(work: &Path, config: &str) -> Vec<(&'static str, bool)> {
    std::fs::write(work.join("run.toml"), config).unwrap();
    let twice = |name: &'static str, args: &dyn Fn(&str) -> Vec<String>| {
        for tag in ["a", "b"] {
            let a = args(tag);
            ok(work, &a.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let (ta, tb) = (tree(&work.join(format!("{name}_a"))), tree(&work.join(format!("{name}_b"))));
        (name, !ta.is_empty() && ta == tb)
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        twice("episodes", &|t| s(&["episodes", "--config", "run.toml", "--count", "3", "--out", &format!("episodes_{t}")])),
        twice("train", &|t| s(&["train", "--config", "run.toml", "--out", &format!("train_{t}")])),
        twice("eval", &|t| {
            s(&["eval", "--config", "run.toml", "--checkpoint", "train_a/checkpoint.json", "--overlays", "2", "--out", &format!("eval_{t}")])
        }),
        twice("gen-prompts", &|t| {
            s(&[
                "gen-prompts", "--config", "run.toml", "--checkpoint", "train_a/checkpoint.json",
                "--support-image", "episodes_a/ep0000_support.png", "--support-mask", "episodes_a/ep0000_support_mask.png",
                "--queries", "episodes_a", "--suffix", "_query.png", "--overlays", "--out", &format!("gen-prompts_{t}"),
            ])
        }),
        twice("render", &|t| {
            s(&[
                "render", "--image", "episodes_a/ep0001_query.png", "--prompts", "gen-prompts_a/ep0001_query.json",
                "--gt", "episodes_a/ep0001_query_mask.png", "--segment", "--out", &format!("render_{t}/ep0001.png"),
            ])
        }),
    ]
}
