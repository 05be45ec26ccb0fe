//! Shared harness pieces for the integration tests.
#![allow(dead_code)]

pub mod cases;
pub mod cli;
pub mod fixtures;
pub mod oracles;

use fob::autodiff::{Tape, Var};
use fob::params::{Binding, ParamStore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates where the 1e-3 and 1e-6 central differences disagree,
    /// i.e. the perturbation crosses a kink (ReLU, clamp, argmax, integer
    /// sampling grid).
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_TOL && self.skipped * 10 <= self.checked
    }
}

fn eval(store: &ParamStore, build: &dyn Fn(&mut Tape, &Binding) -> Var) -> f64 {
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let l = build(&mut t, &b);
    t.scalar(l)
}

/// Compares backprop against central differences on up to `per_tensor`
/// randomly chosen scalars of every parameter.
pub fn check_store(
    store: &ParamStore,
    per_tensor: usize,
    seed: u64,
    build: &dyn Fn(&mut Tape, &Binding) -> Var,
) -> GradReport {
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let l = build(&mut t, &b);
    let mut grads = t.backward(l);
    let analytic = b.collect(&mut grads, store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradReport::default();
    for (k, id) in store.ids().enumerate() {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        };
        for flat in picks {
            let cols = store.get(id).ncols();
            let (i, j) = (flat / cols, flat % cols);
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id)[[i, j]] += delta;
                eval(&s, build)
            };
            let n1 = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            let fine = (at(1e-6) - at(-1e-6)) / 2e-6;
            let a = analytic[k][[i, j]];
            let scale = a.abs().max(n1.abs());
            // a smooth function gives the same slope at both step sizes
            if (n1 - fine).abs() > 1e-4 * scale.max(1e-6) {
                rep.skipped += 1;
                continue;
            }
            rep.checked += 1;
            let rel = if scale < 1e-8 { 0.0 } else { (a - n1).abs() / scale };
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{}[{i},{j}]: analytic {a:e} numeric {n1:e}", store.name(id));
            }
        }
    }
    rep
}

/// Adds `U(-scale, scale)` noise to every parameter so no gradient is
/// structurally zero (zero-initialised heads, unit norms).
pub fn jitter(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Fixed random weights for reducing a node to a scalar.
pub fn probe(t: &mut Tape, v: Var, seed: u64) -> Var {
    let (m, n) = t.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random_matrix(&mut rng, m, n, -1.0, 1.0));
    let p = t.mul(v, w);
    t.sum_all(p)
}
