//! Gradient-check scenarios on instances of at most 8x8, C = 8, N_p = 4.

use fob::autodiff::Tape;
use fob::bcm::Bcm;
use fob::bppc::BppcConfig;
use fob::encoder::{Encoder, EncoderConfig};
use fob::geometry::{BinaryMask, Point2D};
use fob::losses::{coord_loss_var, foreground_loss_var, heatmap_loss_var, rac_loss_var, LossConfig};
use fob::model::{FobModel, ModelConfig};
use fob::params::ParamStore;
use fob::raster::Image;
use fob::spr::{points_to_matrix, GraphKind, Spr, SprConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_store, jitter, probe, random_matrix, GradReport};

const S: usize = 8;
const C: usize = 8;

fn image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::gray(S, S, random_matrix(&mut rng, 1, S * S, 0.0, 1.0).into_iter().collect())
}

fn blob() -> BinaryMask {
    BinaryMask::from_fn(S, S, |r, c| (3..6).contains(&r) && (2..5).contains(&c))
}

pub fn encoder() -> GradReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = Encoder::new(&mut store, &mut rng, EncoderConfig { in_channels: 1, channels: C, depth: 2, size: S }).unwrap();
    jitter(&mut store, 2, 0.05);
    let img = image(3);
    check_store(&store, 6, 4, &|t, b| {
        let f = enc.encode_image(t, b, &img).unwrap();
        probe(t, f, 5)
    })
}

/// Suppression, coarse proposals, masked attention and the heatmap head,
/// with the query features and prototypes as free inputs.
pub fn bcm_chain() -> GradReport {
    let np = 3;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bcm = Bcm::new(&mut store, &mut rng, C, np, 2, 16).unwrap();
    let f_q = store.add("input.f_q", random_matrix(&mut rng, S * S, C, -1.0, 1.0));
    let protos = store.add("input.protos", random_matrix(&mut rng, np, C, -1.0, 1.0));
    let p_fg = store.add("input.p_fg", random_matrix(&mut rng, 1, C, 0.2, 1.0));
    jitter(&mut store, 12, 0.05);
    check_store(&store, 6, 13, &|t, b| {
        let out = bcm.forward(t, b, b[f_q], b[protos], b[p_fg], S, S).unwrap();
        let a = probe(t, out.heatmaps, 14);
        let p = probe(t, out.proposals, 15);
        let p = t.scale(p, 0.1);
        let c = probe(t, out.suppressed.calibrated, 16);
        let s = t.add(a, p);
        t.add(s, c)
    })
}

/// Graph construction, propagation, deformable refinement and the
/// coordinate loss for one graph kind.
pub fn spr_chain(graph: GraphKind) -> GradReport {
    let np = 4;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = SprConfig { k: 3, kappa: 2, graph, ..SprConfig::default() };
    let spr = Spr::new(&mut store, &mut rng, cfg, C, np).unwrap();
    let protos = store.add("input.protos", random_matrix(&mut rng, np, C, -1.0, 1.0));
    let q = store.add("input.q", random_matrix(&mut rng, np, C, -1.0, 1.0));
    let f_q = store.add("input.f_q", random_matrix(&mut rng, S * S, C, -1.0, 1.0));
    jitter(&mut store, 22, 0.1);
    let coarse = [Point2D::new(2.3, 4.6), Point2D::new(5.2, 1.7), Point2D::new(4.4, 5.1), Point2D::new(1.4, 2.8)];
    let gt = points_to_matrix(&[Point2D::new(1.0, 5.5), Point2D::new(6.0, 1.0), Point2D::new(5.5, 6.0), Point2D::new(1.0, 1.5)]);
    check_store(&store, 6, 23, &|t, b| {
        let out = spr.forward(t, b, b[protos], b[q], &coarse, b[f_q], S, S).unwrap();
        let g = t.constant(gt.clone());
        let l = coord_loss_var(t, out.refined, g).unwrap();
        let f = probe(t, out.features, 24);
        let p = probe(t, out.q_prime, 25);
        let s = t.add(l, f);
        t.add(s, p)
    })
}

pub fn heatmap_loss() -> GradReport {
    let np = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let phi = store.add("phi", random_matrix(&mut rng, np, S * S, -1.0, 2.0));
    let hhat = store.add("hhat", random_matrix(&mut rng, np, S * S, 0.0, 1.0));
    let gt = random_matrix(&mut rng, np, S * S, 0.0, 1.0);
    check_store(&store, 40, 32, &|t, b| {
        let g = t.constant(gt.clone());
        heatmap_loss_var(t, b[phi], b[hhat], g).unwrap()
    })
}

pub fn coord_loss() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    let refined = store.add("refined", random_matrix(&mut rng, 4, 2, 0.0, 8.0));
    let gt = random_matrix(&mut rng, 4, 2, 0.0, 8.0);
    check_store(&store, 8, 42, &|t, b| {
        let g = t.constant(gt.clone());
        coord_loss_var(t, b[refined], g).unwrap()
    })
}

pub fn foreground_loss() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut store = ParamStore::new();
    let cal = store.add("calibrated", random_matrix(&mut rng, S * S, 1, 0.05, 0.95));
    let mask = blob();
    check_store(&store, 64, 52, &|t, b| foreground_loss_var(t, b[cal], &mask).unwrap())
}

pub fn rac_loss(include_positive: bool) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut store = ParamStore::new();
    let p_fg = store.add("p_fg", random_matrix(&mut rng, 1, C, -1.0, 1.0));
    let p_pos = store.add("p_pos", random_matrix(&mut rng, 1, C, -1.0, 1.0));
    let p_bg = store.add("p_bg", random_matrix(&mut rng, 4, C, -1.0, 1.0));
    check_store(&store, 32, 62, &|t, b| rac_loss_var(t, b[p_fg], b[p_pos], b[p_bg], 0.1, include_positive).unwrap())
}

pub fn tiny_model() -> FobModel {
    let cfg = ModelConfig {
        encoder: EncoderConfig { in_channels: 1, channels: C, depth: 2, size: S },
        bppc: BppcConfig { r: 3, eps: 2, n_prompts: 4, sigma: 1.5 },
        heads: 2,
        ffn_hidden: 16,
        spr: SprConfig { k: 3, kappa: 2, ..SprConfig::default() },
    };
    let mut m = FobModel::new(cfg, 71).unwrap();
    jitter(&mut m.store, 72, 0.05);
    m
}

/// One loss term of the assembled model against every parameter tensor.
pub fn model_loss(term: &str) -> GradReport {
    let m = tiny_model();
    let (si, qi) = (image(73), image(74));
    let (sm, qm) = (blob(), BinaryMask::from_fn(S, S, |r, c| (2..5).contains(&r) && (3..6).contains(&c)));
    let target = m.target_points(&qm, 75).unwrap();
    let cfg = LossConfig::default();
    let term = term.to_string();
    check_store(&m.store, 3, 76, &|t: &mut Tape, b| {
        let fw = m.forward(t, b, &si, &sm, &qi, 77).unwrap();
        let lv = m.losses(t, &fw, &sm, &qm, &target, &cfg).unwrap();
        match term.as_str() {
            "rac" => lv.rac,
            "heat" => lv.heat,
            "coor" => lv.coor,
            "fore" => lv.fore,
            _ => unreachable!(),
        }
    })
}

/// Every scenario, by name.
pub fn all() -> Vec<(String, GradReport)> {
    let mut out = vec![
        ("encoder".to_string(), encoder()),
        ("bcm chain".to_string(), bcm_chain()),
    ];
    for g in [GraphKind::None, GraphKind::Ring, GraphKind::Adaptive, GraphKind::Mixed] {
        out.push((format!("spr chain ({g:?})"), spr_chain(g)));
    }
    out.push(("heatmap loss".into(), heatmap_loss()));
    out.push(("coord loss".into(), coord_loss()));
    out.push(("foreground loss".into(), foreground_loss()));
    out.push(("rac loss".into(), rac_loss(false)));
    out.push(("rac loss (positive in denominator)".into(), rac_loss(true)));
    for term in ["rac", "heat", "coor", "fore"] {
        out.push((format!("model x L_{term}"), model_loss(term)));
    }
    out
}
