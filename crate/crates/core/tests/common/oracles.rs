//! Loop-based reference implementations, written without ndarray algebra,
//! compared against the library on random small inputs.

use fob::autodiff::Tape;
use fob::bppc::masked_average_pool;
use fob::geometry::{bilinear_sample, gaussian_heatmap, BinaryMask, FeatureMap, Heatmap, Point2D};
use fob::losses::{coord_loss, coord_loss_var, foreground_loss, foreground_loss_var, heatmap_loss, heatmap_loss_var, rac_loss, rac_loss_var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 100;
pub const TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..=8), r.random_range(1..=8))
}

fn matrix(r: &mut ChaCha8Rng, n: usize, m: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| r.random_range(lo..hi))
}

fn max_err(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

pub fn heatmap() -> f64 {
    let mut r = rng(1);
    max_err((0..CASES).map(|_| {
        let (n, hw) = (r.random_range(1..=4), r.random_range(1..=64));
        let phi = matrix(&mut r, n, hw, -1.0, 2.0);
        let hhat = matrix(&mut r, n, hw, -1.0, 2.0);
        let gt = matrix(&mut r, n, hw, 0.0, 1.0);
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..hw {
                s += (phi[[i, j]] - gt[[i, j]]).powi(2);
                s += (hhat[[i, j]] - gt[[i, j]]).powi(2);
            }
        }
        let want = s / (n * hw) as f64;
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(phi.clone()), t.constant(hhat.clone()), t.constant(gt.clone()));
        let v = heatmap_loss_var(&mut t, a, b, c).unwrap();
        let got = heatmap_loss(&phi, &hhat, &gt).unwrap();
        (got - want).abs().max((t.scalar(v) - want).abs())
    }))
}

pub fn coord() -> f64 {
    let mut r = rng(2);
    max_err((0..CASES).map(|_| {
        let n = r.random_range(1..=10);
        let a: Vec<Point2D> = (0..n).map(|_| Point2D::new(r.random_range(-5.0..70.0), r.random_range(-5.0..70.0))).collect();
        let b: Vec<Point2D> = (0..n).map(|_| Point2D::new(r.random_range(0.0..64.0), r.random_range(0.0..64.0))).collect();
        let mut s = 0.0;
        for i in 0..n {
            let dr = a[i].row - b[i].row;
            let dc = a[i].col - b[i].col;
            s += dr * dr + dc * dc;
        }
        let want = s / n as f64;
        let mut t = Tape::new();
        let to = |p: &[Point2D]| Array2::from_shape_fn((p.len(), 2), |(i, j)| if j == 0 { p[i].row } else { p[i].col });
        let (va, vb) = (t.constant(to(&a)), t.constant(to(&b)));
        let v = coord_loss_var(&mut t, va, vb).unwrap();
        (coord_loss(&a, &b).unwrap() - want).abs().max((t.scalar(v) - want).abs())
    }))
}

pub fn foreground() -> f64 {
    let mut r = rng(3);
    max_err((0..CASES).map(|_| {
        let (h, w) = dims(&mut r);
        let probs: Vec<f64> = (0..h * w).map(|_| r.random_range(0.01..0.99)).collect();
        let bits: Vec<u8> = (0..h * w).map(|_| r.random_range(0..2u8)).collect();
        let mask = BinaryMask::from_vec(h, w, bits.clone()).unwrap();
        let mut s = 0.0;
        for i in 0..h * w {
            let y = bits[i] as f64;
            s -= y * probs[i].ln() + (1.0 - y) * (1.0 - probs[i]).ln();
        }
        let want = s / (h * w) as f64;
        let mut t = Tape::new();
        let c = t.constant(Array2::from_shape_vec((h * w, 1), probs.clone()).unwrap());
        let v = foreground_loss_var(&mut t, c, &mask).unwrap();
        (foreground_loss(&probs, &mask).unwrap() - want).abs().max((t.scalar(v) - want).abs())
    }))
}

pub fn rac() -> f64 {
    let mut r = rng(4);
    let cos = |a: &[f64], b: &[f64]| {
        let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..a.len() {
            d += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        d / (na.sqrt() * nb.sqrt())
    };
    max_err((0..CASES).map(|case| {
        let c = r.random_range(2..=8);
        let n = r.random_range(1..=10);
        let tau = r.random_range(0.05..1.0);
        let with_pos = case % 2 == 1;
        let fg: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let pos: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let bg = matrix(&mut r, n, c, -1.0, 1.0);
        let mut denom = 0.0;
        for i in 0..n {
            denom += (cos(&fg, bg.row(i).as_slice().unwrap()) / tau).exp();
        }
        if with_pos {
            denom += (cos(&fg, &pos) / tau).exp();
        }
        let want = -cos(&fg, &pos) / tau + denom.ln();
        let mut t = Tape::new();
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        let (a, b, m) = (t.constant(row(&fg)), t.constant(row(&pos)), t.constant(bg.clone()));
        let v = rac_loss_var(&mut t, a, b, m, tau, with_pos).unwrap();
        let got = rac_loss(&fg, &pos, &bg, tau, with_pos).unwrap();
        (got - want).abs().max((t.scalar(v) - want).abs())
    }))
}

pub fn map() -> f64 {
    let mut r = rng(5);
    max_err((0..CASES).map(|case| {
        let (h, w) = dims(&mut r);
        let c = r.random_range(1..=8);
        let feat = FeatureMap::new(h, w, matrix(&mut r, h * w, c, -2.0, 2.0));
        // every other case uses a hard 0/1 mask
        let mut wts: Vec<f64> =
            (0..h * w).map(|_| if case % 2 == 0 { r.random_range(0.0..1.0) } else { r.random_range(0..2u8) as f64 }).collect();
        wts[r.random_range(0..h * w)] = 1.0;
        let got = masked_average_pool(&feat, &Heatmap::new(h, w, wts.clone())).unwrap();
        let mut err: f64 = 0.0;
        for ch in 0..c {
            let (mut num, mut den) = (0.0, 0.0);
            for u in 0..h {
                for v in 0..w {
                    num += feat.data[[u * w + v, ch]] * wts[u * w + v];
                    den += wts[u * w + v];
                }
            }
            err = err.max((got[ch] - num / den).abs());
        }
        err
    }))
}

pub fn bilinear() -> f64 {
    let mut r = rng(6);
    max_err((0..CASES).map(|case| {
        let (h, w) = dims(&mut r);
        let c = r.random_range(1..=8);
        let feat = FeatureMap::new(h, w, matrix(&mut r, h * w, c, -2.0, 2.0));
        let p = match case % 4 {
            // integer lattice points and points outside the grid
            0 => Point2D::new(r.random_range(0..h) as f64, r.random_range(0..w) as f64),
            1 => Point2D::new(r.random_range(-3.0..h as f64 + 3.0), r.random_range(-3.0..w as f64 + 3.0)),
            _ => Point2D::new(r.random_range(0.0..(h - 1) as f64 + 1e-12), r.random_range(0.0..(w - 1) as f64 + 1e-12)),
        };
        let (pr, pc) = (p.row.clamp(0.0, (h - 1) as f64), p.col.clamp(0.0, (w - 1) as f64));
        let got = bilinear_sample(&feat, p);
        let mut err: f64 = 0.0;
        for ch in 0..c {
            let mut want = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let k = (1.0 - (pr - u as f64).abs()).max(0.0) * (1.0 - (pc - v as f64).abs()).max(0.0);
                    want += k * feat.data[[u * w + v, ch]];
                }
            }
            err = err.max((got[ch] - want).abs());
        }
        err
    }))
}

pub fn gaussian() -> f64 {
    let mut r = rng(7);
    max_err((0..CASES).map(|_| {
        let (h, w) = dims(&mut r);
        let center = Point2D::new(r.random_range(-2.0..10.0), r.random_range(-2.0..10.0));
        let sigma = r.random_range(0.3..6.0);
        let g = gaussian_heatmap(center, sigma, h, w).unwrap();
        let mut err: f64 = 0.0;
        for u in 0..h {
            for v in 0..w {
                let d2 = (u as f64 - center.row).powi(2) + (v as f64 - center.col).powi(2);
                err = err.max((g.get(u, v) - (-d2 / (2.0 * sigma * sigma)).exp()).abs());
            }
        }
        err
    }))
}

/// `(name, max absolute error)` for every oracle.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("heatmap_loss", heatmap()),
        ("coord_loss", coord()),
        ("foreground_loss", foreground()),
        ("rac_loss", rac()),
        ("masked_average_pool", map()),
        ("bilinear_sample", bilinear()),
        ("gaussian_heatmap", gaussian()),
    ]
}
