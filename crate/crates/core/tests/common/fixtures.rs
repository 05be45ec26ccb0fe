//! Closed-form values that the implementation must reproduce.

use fob::geometry::{gaussian_heatmap, Point2D};
use fob::losses::{heatmap_loss, rac_loss};
use fob::spr::{adaptive_graph, ring_graph};
use fob::train::TrainConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
    pub tol: f64,
}

impl Fixture {
    pub fn ok(&self) -> bool {
        (self.got - self.want).abs() <= self.tol
    }
}

const EXACT: f64 = 1e-12;

/// The worst deviation over a family of instances, reported as one fixture.
fn worst(name: &'static str, want: f64, tol: f64, values: impl IntoIterator<Item = f64>) -> Fixture {
    let got = values.into_iter().max_by(|a, b| (a - want).abs().total_cmp(&(b - want).abs())).expect("non-empty");
    Fixture { name, got, want, tol }
}

pub fn rac_equal_similarity() -> Vec<Fixture> {
    let fg = [0.3, -1.2, 0.7, 2.0];
    let other = [1.0, 0.5, -0.25, 0.1];
    (1..=10)
        .flat_map(|n| {
            let bg = Array2::from_shape_fn((n, 4), |(_, j)| other[j] * (1.0 + n as f64));
            [0.05, 0.1, 0.7].map(|tau| Fixture {
                name: "rac equal similarity = ln N_p",
                got: rac_loss(&fg, &other, &bg, tau, false).unwrap(),
                want: (n as f64).ln(),
                tol: EXACT,
            })
        })
        .collect()
}

pub fn gaussian_at_sigma() -> Fixture {
    let on_axis = gaussian_heatmap(Point2D::new(3.0, 4.0), 3.0, 8, 8).unwrap().get(3, 7);
    let diagonal = gaussian_heatmap(Point2D::new(0.0, 0.0), 5.0, 8, 8).unwrap().get(3, 4);
    worst("gaussian at distance sigma = e^-1/2", (-0.5f64).exp(), EXACT, [on_axis, diagonal])
}

pub fn heatmap_constant_offset() -> Vec<Fixture> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    [0.0, 0.25, -0.5, 1.0, 3.0]
        .into_iter()
        .map(|delta: f64| {
            let gt = Array2::from_shape_fn((4, 64), |_| r.random_range(0.0..1.0));
            Fixture {
                name: "heatmap constant offset = 2 delta^2",
                got: heatmap_loss(&(&gt + delta), &(&gt - delta), &gt).unwrap(),
                want: 2.0 * delta * delta,
                tol: EXACT,
            }
        })
        .collect()
}

pub fn ring_row_sums() -> Fixture {
    let sums = (3..=16).flat_map(|n| ring_graph(n).unwrap().data.rows().into_iter().map(|r| r.sum()).collect::<Vec<_>>());
    worst("ring graph row sums = 2", 2.0, 0.0, sums)
}

pub fn adaptive_row_sums() -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut sums = Vec::new();
    for _ in 0..50 {
        let (n, c) = (r.random_range(2..=12), r.random_range(1..=16));
        let m = |r: &mut ChaCha8Rng, a, b, s: f64| Array2::from_shape_fn((a, b), |_| r.random_range(-s..s));
        let p = m(&mut r, n, c, 3.0);
        let (wt, wp) = (m(&mut r, c, c, 2.0), m(&mut r, c, c, 2.0));
        sums.extend(adaptive_graph(&p, &wt, &wp).unwrap().data.rows().into_iter().map(|row| row.sum()));
    }
    worst("adaptive graph row sums = 1", 1.0, 1e-6, sums)
}

pub fn lr_at_2500() -> Fixture {
    Fixture { name: "lr at iteration 2500 = 9.025e-5", got: TrainConfig::default().lr_at(2500), want: 9.025e-5, tol: EXACT }
}

pub fn all() -> Vec<Fixture> {
    let mut out = rac_equal_similarity();
    out.push(gaussian_at_sigma());
    out.extend(heatmap_constant_offset());
    out.push(ring_row_sums());
    out.push(adaptive_row_sums());
    out.push(lr_at_2500());
    out
}
