//! Structure-guided prompt refinement.
//!
//! Support prototypes define a prompt graph (learned affinities mixed with a
//! closed ring); query prototypes pooled at the coarse prompts are propagated
//! over that graph, then every prompt walks toward its refined location with
//! a few rounds of learned, bounded offsets and bilinear feature lookups.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Tape, Var};
use crate::bppc::pool_points;
use crate::error::{FobError, Result};
use crate::geometry::{FeatureMap, Point2D};
use crate::layers::Linear;
use crate::params::{Binding, ParamId, ParamStore};

/// Which prompt graph feeds the propagation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    /// Self-loops only.
    None,
    Ring,
    Adaptive,
    Mixed,
}

impl std::str::FromStr for GraphKind {
    type Err = FobError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "ring" => Ok(Self::Ring),
            "adaptive" => Ok(Self::Adaptive),
            "mixed" => Ok(Self::Mixed),
            other => Err(FobError::Config(format!("unknown graph kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub data: Array2<f64>,
    pub kind: GraphKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SprConfig {
    /// Offsets per prompt and iteration.
    pub k: usize,
    pub kappa: usize,
    /// Per-step offset bound in pixels; `None` means working size / 8.
    pub beta: Option<f64>,
    pub graph: GraphKind,
    pub alpha_init: f64,
    /// With `false` the model is built and trained without refinement and the
    /// coarse points are its output.
    pub enabled: bool,
}

impl Default for SprConfig {
    fn default() -> Self {
        Self { k: 8, kappa: 3, beta: None, graph: GraphKind::Mixed, alpha_init: 0.5, enabled: true }
    }
}

impl SprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.kappa == 0 {
            return Err(FobError::InvalidParameter("spr k and kappa must be >= 1".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(FobError::InvalidParameter("spr alpha_init must lie in (0, 1)".into()));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(FobError::InvalidParameter("spr beta must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn beta_for(&self, size: usize) -> f64 {
        self.beta.unwrap_or(size as f64 / 8.0)
    }
}

pub fn ring_graph(n: usize) -> Result<AdjacencyMatrix> {
    if n < 2 {
        return Err(FobError::InvalidParameter(format!("ring graph needs at least 2 nodes, got {n}")));
    }
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        a[[i, (i + 1) % n]] = 1.0;
        a[[i, (i + n - 1) % n]] = 1.0;
    }
    Ok(AdjacencyMatrix { data: a, kind: GraphKind::Ring })
}

/// `softmax_rows((P W_theta)(P W_phi)^T / sqrt(C))`.
pub fn adaptive_graph(p: &Array2<f64>, w_theta: &Array2<f64>, w_phi: &Array2<f64>) -> Result<AdjacencyMatrix> {
    if p.nrows() < 2 {
        return Err(FobError::InvalidParameter("adaptive graph needs at least 2 prototypes".into()));
    }
    let logits = p.dot(w_theta).dot(&p.dot(w_phi).t()) / (p.ncols() as f64).sqrt();
    Ok(AdjacencyMatrix { data: softmax_rows(&logits), kind: GraphKind::Adaptive })
}

pub fn mix_graphs(a: &AdjacencyMatrix, r: &AdjacencyMatrix, alpha: f64) -> Result<AdjacencyMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FobError::InvalidParameter(format!("mixing weight {alpha} outside [0, 1]")));
    }
    if a.data.dim() != r.data.dim() {
        return Err(FobError::Shape("graphs differ in size".into()));
    }
    Ok(AdjacencyMatrix { data: &a.data * alpha + &r.data * (1.0 - alpha), kind: GraphKind::Mixed })
}

/// `ReLU(D^-1/2 A D^-1/2 Q W_g)` with `D` the row sums of `A`.
pub fn gcn_propagate(a: &AdjacencyMatrix, q: &Array2<f64>, w_g: &Array2<f64>) -> Result<Array2<f64>> {
    let d = degree_inv_sqrt(&a.data)?;
    let n = a.data.nrows();
    let norm = Array2::from_shape_fn((n, n), |(i, j)| a.data[[i, j]] * d[i] * d[j]);
    Ok(norm.dot(q).dot(w_g).mapv(|v| v.max(0.0)))
}

fn degree_inv_sqrt(a: &Array2<f64>) -> Result<Vec<f64>> {
    a.rows()
        .into_iter()
        .enumerate()
        .map(|(row, r)| {
            let s = r.sum();
            if s > 0.0 && s.is_finite() {
                Ok(s.powf(-0.5))
            } else {
                Err(FobError::DegenerateGraph { row })
            }
        })
        .collect()
}

/// Query prompt prototypes: Gaussian pooling of query features at the
/// coarse prompts, through the same code path as the support prototypes.
pub fn build_query_prototypes(feat_q: &FeatureMap, coarse: &[Point2D], sigma: f64) -> Result<Array2<f64>> {
    pool_points(feat_q, coarse, sigma)
}

#[derive(Clone, Debug)]
pub struct Spr {
    pub cfg: SprConfig,
    pub channels: usize,
    pub n_prompts: usize,
    pub w_theta: Linear,
    pub w_phi: Linear,
    pub alpha_raw: ParamId,
    pub w_g: Linear,
    pub off1: Linear,
    pub off2: Linear,
    pub w_att: Linear,
}

/// Tape nodes of one refinement pass.
#[derive(Clone, Copy, Debug)]
pub struct SprOutput {
    pub adjacency: Var,
    pub q: Var,
    pub q_prime: Var,
    /// `N_p x 2` refined `(row, col)` coordinates.
    pub refined: Var,
    /// `N_p x C` final sampled features.
    pub features: Var,
}

impl Spr {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: SprConfig,
        channels: usize,
        n_prompts: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if matches!(cfg.graph, GraphKind::Ring | GraphKind::Adaptive | GraphKind::Mixed) && n_prompts < 2 {
            return Err(FobError::InvalidParameter("prompt graphs need at least 2 prompts".into()));
        }
        let c = channels;
        let logit = (cfg.alpha_init / (1.0 - cfg.alpha_init)).ln();
        Ok(Self {
            cfg,
            channels,
            n_prompts,
            w_theta: Linear::new(store, rng, "spr.w_theta", c, c, false, 1.0),
            w_phi: Linear::new(store, rng, "spr.w_phi", c, c, false, 1.0),
            alpha_raw: store.add("spr.alpha_raw", Array2::from_elem((1, 1), logit)),
            w_g: Linear::new(store, rng, "spr.w_g", c, c, false, 2f64.sqrt()),
            off1: Linear::new(store, rng, "spr.offset1", 2 * c, c, true, 2f64.sqrt()),
            // zero initial offsets: refinement starts as the identity
            off2: Linear::new(store, rng, "spr.offset2", c, 2 * cfg.k, true, 0.0),
            w_att: Linear::new(store, rng, "spr.w_att", c, cfg.k, false, 1.0),
        })
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        sigmoid(store.get(self.alpha_raw)[[0, 0]])
    }

    pub fn adaptive(&self, t: &mut Tape, b: &Binding, protos: Var) -> Var {
        let th = self.w_theta.forward(t, b, protos);
        let ph = self.w_phi.forward(t, b, protos);
        let ph_t = t.transpose(ph);
        let logits = t.matmul(th, ph_t);
        let logits = t.scale(logits, 1.0 / (self.channels as f64).sqrt());
        t.softmax_rows(logits)
    }

    /// The adjacency selected by the configured graph kind.
    pub fn adjacency(&self, t: &mut Tape, b: &Binding, protos: Var) -> Result<Var> {
        let n = self.n_prompts;
        Ok(match self.cfg.graph {
            GraphKind::None => t.constant(Array2::eye(n)),
            GraphKind::Ring => t.constant(ring_graph(n)?.data),
            GraphKind::Adaptive => self.adaptive(t, b, protos),
            GraphKind::Mixed => {
                let ada = self.adaptive(t, b, protos);
                let ring = t.constant(ring_graph(n)?.data);
                let alpha = t.sigmoid(b[self.alpha_raw]);
                let beta = t.one_minus(alpha);
                let a = t.mul_scalar(ada, alpha);
                let r = t.mul_scalar(ring, beta);
                t.add(a, r)
            }
        })
    }

    pub fn propagate(&self, t: &mut Tape, b: &Binding, adjacency: Var, q: Var) -> Result<Var> {
        degree_inv_sqrt(t.value(adjacency))?;
        let d = t.sum_rows(adjacency);
        let dinv = t.powf(d, -0.5);
        let left = t.mul_col(adjacency, dinv);
        let dinv_t = t.transpose(dinv);
        let norm = t.mul_row(left, dinv_t);
        let m = t.matmul(norm, q);
        let m = self.w_g.forward(t, b, m);
        Ok(t.relu(m))
    }

    /// Iterative offset refinement of `coarse (N_p x 2)` over query features
    /// `f_q ((h*w) x C)`. All prompts are updated together; the per-prompt
    /// weighted sums use a block-diagonal weight matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn refine(
        &self,
        t: &mut Tape,
        b: &Binding,
        coarse: Var,
        q: Var,
        q_prime: Var,
        f_q: Var,
        h: usize,
        w: usize,
    ) -> (Var, Var) {
        let n = t.shape(coarse).0;
        let k = self.cfg.k;
        let beta = self.cfg.beta_for(h.max(w));
        let expand = t.constant(Array2::from_shape_fn((n * k, n), |(r, c)| (r / k == c) as u8 as f64));
        let blocks = t.constant(Array2::from_shape_fn((n, n * k), |(r, c)| (c / k == r) as u8 as f64));
        let att = self.w_att.forward(t, b, q);
        let wts = t.softmax_rows(att);
        let flat = t.reshape(wts, 1, n * k);
        let mix = t.mul_row(blocks, flat);
        let lo = vec![0.0, 0.0];
        let hi = vec![(h - 1) as f64, (w - 1) as f64];
        let mut mu = coarse;
        let mut f = q_prime;
        for _ in 0..self.cfg.kappa {
            let v = t.concat_cols(&[q, f]);
            let hid = self.off1.forward(t, b, v);
            let hid = t.relu(hid);
            let o = self.off2.forward(t, b, hid);
            let o = t.tanh(o);
            let o = t.scale(o, beta);
            let offsets = t.reshape(o, n * k, 2);
            let base = t.matmul(expand, mu);
            let cand = t.add(base, offsets);
            let next = t.matmul(mix, cand);
            mu = t.clamp_cols(next, lo.clone(), hi.clone());
            let samples = t.bilinear(f_q, cand, h, w);
            f = t.matmul(mix, samples);
        }
        (mu, f)
    }

    /// Graph construction, propagation and refinement. `coarse` enters as a
    /// constant: the argmax that produced it does not pass gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &mut Tape,
        b: &Binding,
        protos: Var,
        q: Var,
        coarse: &[Point2D],
        f_q: Var,
        h: usize,
        w: usize,
    ) -> Result<SprOutput> {
        if coarse.len() != self.n_prompts || t.shape(q).0 != self.n_prompts {
            return Err(FobError::Shape(format!("expected {} coarse prompts", self.n_prompts)));
        }
        let adjacency = self.adjacency(t, b, protos)?;
        let q_prime = self.propagate(t, b, adjacency, q)?;
        let pts = t.constant(points_to_matrix(coarse));
        let (refined, features) = self.refine(t, b, pts, q, q_prime, f_q, h, w);
        Ok(SprOutput { adjacency, q, q_prime, refined, features })
    }

    /// Eval-mode refinement with fixed parameters.
    pub fn deformable_refine(
        &self,
        store: &ParamStore,
        coarse: &[Point2D],
        q: &Array2<f64>,
        q_prime: &Array2<f64>,
        feat_q: &FeatureMap,
    ) -> Result<Vec<Point2D>> {
        if coarse.len() != q.nrows() || q.nrows() != q_prime.nrows() {
            return Err(FobError::Shape("refinement inputs disagree on prompt count".into()));
        }
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let (pv, qv, qpv, fv) = (
            t.constant(points_to_matrix(coarse)),
            t.constant(q.clone()),
            t.constant(q_prime.clone()),
            t.constant(feat_q.data.clone()),
        );
        let (mu, _) = self.refine(&mut t, &b, pv, qv, qpv, fv, feat_q.h, feat_q.w);
        Ok(matrix_to_points(t.value(mu)))
    }
}

pub fn points_to_matrix(points: &[Point2D]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 2), |(i, j)| if j == 0 { points[i].row } else { points[i].col })
}

pub fn matrix_to_points(m: &Array2<f64>) -> Vec<Point2D> {
    m.rows().into_iter().map(|r| Point2D::new(r[0], r[1])).collect()
}
