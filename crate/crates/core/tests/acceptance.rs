//! End-to-end acceptance checks, one line per criterion:
//!
//! 1. gradient integrity, 2. formula oracles, 3. closed-form fixtures,
//! 4. over-segmentation repair, 5. ablation ordering, 6. refinement value,
//! 7. CLI determinism, 8. confidence-baseline critique.
//!
//! Criteria 4 to 6 and 8 train at the laptop scale of `configs/desk.toml`
//! through the `fob` binary (fifteen runs, roughly an hour on one core). Outputs go under the cargo target tmp dir; set
//! `FOB_ACCEPTANCE_REUSE=1` to reuse checkpoints left by a previous run.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::cli::{ok, TINY};
use common::{cases, fixtures, oracles};
use fob::backend::OracleBackend;
use fob::config::RunConfig;
use fob::eval::{evaluate_variants, PromptVariant, Report};
use fob::model::FobModel;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Ring sizes of the sweep: the default and one on either side of it.
const R_BASE: usize = 7;
const R_WIDE: usize = 9;
const R_TIGHT: usize = 3;
const TAU_BASE: f64 = 0.1;
const TAU_HIGH: f64 = 0.7;
/// Allowed Dice drop for "does not degrade" comparisons.
const SLACK: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml").canonicalize().unwrap()
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if std::env::var_os("FOB_ACCEPTANCE_REUSE").is_none() && dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn overrides(r: usize, tau: f64) -> Vec<String> {
    vec![format!("bppc.r={r}"), format!("loss.tau={tau}")]
}

/// Trains (unless reusable) and evaluates one sweep cell through the CLI;
/// returns the run directory and its mean Dice.
fn sweep_cell(work: &Path, r: usize, tau: f64, seed: u64) -> (PathBuf, f64) {
    let run = work.join(format!("r{r}_tau{tau}_s{seed}"));
    let report = run_cell(&run, &overrides(r, tau), seed);
    (run, report.mean.dice)
}

/// The base setting trained without the refinement stage.
fn no_refinement_cell(work: &Path, seed: u64) -> Report {
    let mut sets = overrides(R_BASE, TAU_BASE);
    sets.push("spr.enabled=false".into());
    run_cell(&work.join(format!("nospr_s{seed}")), &sets, seed)
}

fn run_cell(run: &Path, sets: &[String], seed: u64) -> Report {
    let work = run.parent().unwrap();
    let cfg = desk_config();
    let mut common: Vec<String> = vec!["--config".into(), cfg.to_string_lossy().into(), "--seed".into(), seed.to_string()];
    for o in sets.iter().cloned() {
        common.extend(["--set".into(), o]);
    }
    let ckpt = run.join("checkpoint.json");
    if !(std::env::var_os("FOB_ACCEPTANCE_REUSE").is_some() && ckpt.exists()) {
        let start = Instant::now();
        let mut args = vec!["train".to_string()];
        args.extend(common.clone());
        args.extend(["--out".into(), run.to_string_lossy().into()]);
        ok(work, &args.iter().map(String::as_str).collect::<Vec<_>>());
        eprintln!("trained {} in {:.0}s", run.display(), start.elapsed().as_secs_f64());
    }
    let mut args = vec!["eval".to_string()];
    args.extend(common);
    args.extend(["--checkpoint".into(), ckpt.to_string_lossy().into(), "--out".into(), run.join("eval").to_string_lossy().into()]);
    ok(work, &args.iter().map(String::as_str).collect::<Vec<_>>());
    eval_report(run)
}

fn eval_report(run: &Path) -> Report {
    serde_json::from_str(&std::fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let reports = cases::all();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let failed: Vec<&String> = reports.iter().filter(|(_, r)| !r.ok()).map(|(n, _)| n).collect();
    outcome(
        failed.is_empty() && secs <= 60.0,
        format!("{} cases, worst rel err {worst:.2e} (tol 1e-3), {secs:.1}s (limit 60s), failing {failed:?}", reports.len()),
    )
}

fn criterion_2() -> Outcome {
    let all = oracles::all();
    let worst = all.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failed: Vec<&str> = all.iter().filter(|(_, e)| *e > oracles::TOL).map(|(n, _)| *n).collect();
    outcome(failed.is_empty(), format!("{} functions x {} cases, worst abs err {worst:.2e} (tol 1e-9), failing {failed:?}", all.len(), oracles::CASES))
}

fn criterion_3() -> Outcome {
    let all = fixtures::all();
    let failed: Vec<String> = all.iter().filter(|f| !f.ok()).map(|f| format!("{}: {} vs {}", f.name, f.got, f.want)).collect();
    outcome(failed.is_empty(), format!("{} fixtures, failing {failed:?}", all.len()))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let results = common::cli::determinism(dir.path(), TINY);
    let differing: Vec<&str> = results.iter().filter(|(_, same)| !same).map(|(n, _)| *n).collect();
    outcome(differing.is_empty(), format!("{} commands run twice, differing {differing:?}", results.len()))
}

fn variant<'a>(reports: &'a [Report], v: PromptVariant) -> &'a Report {
    reports.iter().find(|r| r.variant == v).unwrap()
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = vec![(1, criterion_1()), (2, criterion_2()), (3, criterion_3()), (7, criterion_7())];

    let work = work_dir();
    // sweep cells: [seed][base, wide r, tight r, high tau]
    let cells: Vec<[(PathBuf, f64); 4]> = SEEDS
        .iter()
        .map(|&s| {
            [
                sweep_cell(&work, R_BASE, TAU_BASE, s),
                sweep_cell(&work, R_WIDE, TAU_BASE, s),
                sweep_cell(&work, R_TIGHT, TAU_BASE, s),
                sweep_cell(&work, R_BASE, TAU_HIGH, s),
            ]
        })
        .collect();
    let no_refinement: Vec<Report> = SEEDS.iter().map(|&s| no_refinement_cell(&work, s)).collect();

    // criteria 4, 6 and 8 on the seed-0 baseline run
    let cfg = RunConfig::load(&desk_config(), &overrides(R_BASE, TAU_BASE)).unwrap();
    let model = FobModel::load(&cells[0][0].0.join("checkpoint.json")).unwrap();
    let variants = [PromptVariant::Full, PromptVariant::NoBgPrompts, PromptVariant::NoSpr, PromptVariant::Confidence];
    let start = Instant::now();
    let reports =
        evaluate_variants(Some(&model), &cfg.eval_sampler().unwrap(), &OracleBackend::new(cfg.oracle), &cfg.eval_config(), &variants).unwrap();
    eprintln!("evaluated {} variants in {:.0}s", variants.len(), start.elapsed().as_secs_f64());
    for rep in &reports {
        Report::write(rep, &work, &format!("baseline_{}", rep.variant.name())).unwrap();
    }
    let (full, nobg, nospr, conf) = (
        &variant(&reports, PromptVariant::Full).mean,
        &variant(&reports, PromptVariant::NoBgPrompts).mean,
        &variant(&reports, PromptVariant::NoSpr).mean,
        &variant(&reports, PromptVariant::Confidence).mean,
    );
    let n = cfg.data.eval_episodes;
    let r = cfg.bppc.r as f64;
    let outside = 1.0 - full.bg_inside.unwrap();
    let boundary = full.bg_boundary.unwrap();
    results.push((
        4,
        outcome(
            full.dice - nobg.dice >= 0.05 && outside >= 0.9 && boundary <= r,
            format!(
                "{n} episodes: Dice full {:.4} vs fg-only {:.4} (gap {:.4}, need >= 0.05); bg outside GT {:.3} (need >= 0.9); mean boundary distance {boundary:.3} (need <= r = {r})",
                full.dice, nobg.dice, full.dice - nobg.dice, outside
            ),
        ),
    ));

    let dice_of = |k: usize| cells.iter().map(|c| c[k].1).collect::<Vec<_>>();
    let (base, wide, tight, hot) = (dice_of(0), dice_of(1), dice_of(2), dice_of(3));
    let wins = |f: &dyn Fn(usize) -> bool| (0..SEEDS.len()).filter(|&i| f(i)).count();
    let w_wide = wins(&|i| base[i] > wide[i]);
    let w_tight = wins(&|i| base[i] > tight[i]);
    let w_tau = wins(&|i| base[i] >= hot[i] - SLACK);
    let majority = SEEDS.len() / 2 + 1;
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join("/");
    results.push((
        5,
        outcome(
            w_wide >= majority && w_tight >= majority && w_tau >= majority,
            format!(
                "Dice per seed: r={R_BASE} {} | r={R_WIDE} {} | r={R_TIGHT} {} | tau={TAU_HIGH} {}; seeds with r={R_BASE} > r={R_WIDE}: {w_wide}/3, > r={R_TIGHT}: {w_tight}/3, tau {TAU_BASE} >= tau {TAU_HIGH} - {SLACK}: {w_tau}/3 (need {majority})",
                fmt(&base), fmt(&wide), fmt(&tight), fmt(&hot)
            ),
        ),
    ));

    // the comparison model is trained without refinement; bypassing the
    // stage of the full model at inference is reported for reference only
    let full_runs: Vec<Report> = cells.iter().map(|c| eval_report(&c[0].0)).collect();
    let d_full = mean(&full_runs.iter().map(|r| r.mean.dice).collect::<Vec<_>>());
    let d_off = mean(&no_refinement.iter().map(|r| r.mean.dice).collect::<Vec<_>>());
    let res_full = mean(&full_runs.iter().map(|r| r.mean.ring_residual.unwrap()).collect::<Vec<_>>());
    let res_off = mean(&no_refinement.iter().map(|r| r.mean.ring_residual.unwrap()).collect::<Vec<_>>());
    let per_seed = |rs: &[Report]| fmt(&rs.iter().map(|r| r.mean.dice).collect::<Vec<_>>());
    results.push((
        6,
        outcome(
            d_full >= d_off - SLACK && res_off > res_full,
            format!(
                "mean over seeds: Dice full {d_full:.4} ({}) vs trained without refinement {d_off:.4} ({}) (need full >= other - {SLACK}); ring residual full {res_full:.3} vs without {res_off:.3} (need strictly larger); [info] seed-0 coarse points of the full model: Dice {:.4}, residual {:.3}",
                per_seed(&full_runs), per_seed(&no_refinement), nospr.dice, nospr.ring_residual.unwrap()
            ),
        ),
    ));

    let (b_conf, b_full) = (conf.bg_boundary.unwrap(), boundary);
    results.push((8, outcome(b_conf > b_full, format!("mean bg boundary distance: confidence baseline {b_conf:.3} vs model {b_full:.3}"))));

    results.sort_by_key(|(k, _)| *k);
    println!();
    for (k, o) in &results {
        println!("criterion {k}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
