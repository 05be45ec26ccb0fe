use fob::episodes::{fold_split, standard_categories, EpisodeSampler};
use fob::losses::LossConfig;
use fob::model::{FobModel, ModelConfig};
use fob::train::{train, LogRow, TrainConfig, TrainOutputs};

fn small() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.size = 32;
    cfg.encoder.channels = 8;
    cfg.ffn_hidden = 16;
    cfg.heads = 2;
    cfg.bppc.r = 7;
    cfg.bppc.sigma = 2.0;
    cfg
}

fn run(iters: usize, out: Option<&TrainOutputs>) -> (FobModel, Vec<LogRow>) {
    let mut model = FobModel::new(small(), 0).unwrap();
    let (base, _) = fold_split(&standard_categories(), 0, 5).unwrap();
    let sampler = EpisodeSampler::new(base, 32, 1).unwrap();
    let cfg = TrainConfig { iterations: iters, lr: 1e-3, seed: 4, ..TrainConfig::default() };
    let rows = train(&mut model, &sampler, &cfg, &LossConfig::default(), out).unwrap();
    (model, rows)
}

#[test]
fn loss_goes_down() {
    let (_, rows) = run(60, None);
    let mean = |rs: &[LogRow]| rs.iter().map(|r| r.l_total).sum::<f64>() / rs.len() as f64;
    let (head, tail) = (mean(&rows[..15]), mean(&rows[45..]));
    eprintln!("mean total loss: first 15 {head:.4}, last 15 {tail:.4}");
    assert!(tail < head, "{head} -> {tail}");
    assert!(rows.iter().all(|r| r.l_total.is_finite()));
}

#[test]
fn training_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().join("a") };
    let (a, rows_a) = run(4, Some(&out));
    let (b, rows_b) = run(4, None);
    assert_eq!(rows_a, rows_b);
    let ck = |m: &FobModel| serde_json::to_string(&m.to_checkpoint(Some(4))).unwrap();
    assert_eq!(ck(&a), ck(&b));
    let loaded = FobModel::load(&out.checkpoint()).unwrap();
    assert_eq!(ck(&loaded), ck(&a));
    let log = std::fs::read_to_string(out.metrics()).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iter,L_rac,L_heat,L_coor,L_fore,L_total,lr");
    assert_eq!(log.lines().count(), 5);
}
