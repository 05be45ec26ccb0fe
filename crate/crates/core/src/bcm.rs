//! Background-centric context modelling.
//!
//! The query foreground is suppressed with the support foreground prototype,
//! each background prototype produces a response map over the suppressed
//! features, those responses bias a transformer layer's attention toward
//! likely prompt regions, and a small convolutional head regresses one
//! heatmap per prompt.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{FobError, Result};
use crate::geometry::{argmax_index, FeatureMap, Point2D};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::{Binding, ParamStore};

pub const CALIBRATION_FLOOR: f64 = 1e-6;

/// Raw cosine map in `[-1, 1]` plus its `(0, 1)` calibrated form.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    pub h: usize,
    pub w: usize,
    pub raw: Vec<f64>,
    pub calibrated: Vec<f64>,
}

pub fn calibrate(raw: f64) -> f64 {
    ((raw + 1.0) / 2.0).clamp(CALIBRATION_FLOOR, 1.0 - CALIBRATION_FLOOR)
}

/// Tape nodes produced by foreground suppression.
#[derive(Clone, Copy, Debug)]
pub struct Suppressed {
    /// `(h*w) x C`
    pub features: Var,
    /// `(h*w) x 1`
    pub raw: Var,
    /// `(h*w) x 1`
    pub calibrated: Var,
}

/// Differentiable suppression: `F_sup = (1 - cos(F_q, p_fg)) F_q`.
pub fn suppress(t: &mut Tape, f_q: Var, p_fg: Var) -> Result<Suppressed> {
    if t.value(p_fg).iter().all(|v| *v == 0.0) {
        return Err(FobError::DegeneratePrototype("foreground prototype is the zero vector".into()));
    }
    let raw = t.cosine_rows(f_q, p_fg);
    let factor = t.one_minus(raw);
    let features = t.mul_col(f_q, factor);
    let half = t.scale(raw, 0.5);
    let shifted = t.shift(half, 0.5);
    let calibrated = t.clamp(shifted, CALIBRATION_FLOOR, 1.0 - CALIBRATION_FLOOR);
    Ok(Suppressed { features, raw, calibrated })
}

pub fn suppress_foreground(feat_q: &FeatureMap, p_fg: &[f64]) -> Result<(FeatureMap, CorrelationMap)> {
    if p_fg.len() != feat_q.channels() {
        return Err(FobError::Shape(format!("prototype has {} channels, features {}", p_fg.len(), feat_q.channels())));
    }
    let mut t = Tape::new();
    let f = t.constant(feat_q.data.clone());
    let p = t.constant(Array2::from_shape_vec((1, p_fg.len()), p_fg.to_vec()).expect("row"));
    let s = suppress(&mut t, f, p)?;
    let corr = CorrelationMap {
        h: feat_q.h,
        w: feat_q.w,
        raw: t.value(s.raw).iter().copied().collect(),
        calibrated: t.value(s.calibrated).iter().copied().collect(),
    };
    Ok((FeatureMap::new(feat_q.h, feat_q.w, t.value(s.features).clone()), corr))
}

#[derive(Clone, Debug)]
pub struct Bcm {
    pub channels: usize,
    pub n_prompts: usize,
    pub heads: usize,
    pub w_s: Linear,
    pub w_q: Linear,
    pub gate1: Linear,
    pub gate2: Linear,
    pub bias_conv: Linear,
    pub att_q: Linear,
    pub att_k: Linear,
    pub att_v: Linear,
    pub att_o: Linear,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
    pub head_conv: Conv2d,
    pub head_out: Conv2d,
}

/// Tape nodes of one BCM forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BcmOutput {
    pub suppressed: Suppressed,
    /// `N_p x (h*w)` coarse proposals.
    pub proposals: Var,
    /// `(h*w) x C` modulated features.
    pub modulated: Var,
    /// `N_p x (h*w)` predicted heatmaps in `(0, 1)`.
    pub heatmaps: Var,
}

impl Bcm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: usize,
        n_prompts: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(FobError::InvalidParameter(format!("{heads} heads do not divide {channels} channels")));
        }
        if n_prompts == 0 {
            return Err(FobError::InvalidParameter("need at least one prompt".into()));
        }
        let c = channels;
        // the proposal projections start at a small scale so the initial attention bias stays moderate
        let g = 1.0 / (c as f64).sqrt();
        Ok(Self {
            channels,
            n_prompts,
            heads,
            w_s: Linear::new(store, rng, "bcm.w_s", c, c, false, g.sqrt()),
            w_q: Linear::new(store, rng, "bcm.w_q", c, c, false, g.sqrt()),
            gate1: Linear::new(store, rng, "bcm.gate1", c, c, true, 2f64.sqrt()),
            gate2: Linear::new(store, rng, "bcm.gate2", c, c, true, 1.0),
            bias_conv: Linear::new(store, rng, "bcm.bias_conv", n_prompts, 1, true, 1.0),
            att_q: Linear::new(store, rng, "bcm.attn.q", c, c, false, 1.0),
            att_k: Linear::new(store, rng, "bcm.attn.k", c, c, false, 1.0),
            att_v: Linear::new(store, rng, "bcm.attn.v", c, c, false, 1.0),
            att_o: Linear::new(store, rng, "bcm.attn.o", c, c, false, 1.0),
            ln1: LayerNorm::new(store, "bcm.ln1", c),
            ffn1: Linear::new(store, rng, "bcm.ffn1", c, ffn_hidden, true, 2f64.sqrt()),
            ffn2: Linear::new(store, rng, "bcm.ffn2", ffn_hidden, c, true, 1.0),
            ln2: LayerNorm::new(store, "bcm.ln2", c),
            head_conv: Conv2d::new(store, rng, "bcm.head.conv", c, c, 3, 1, 2f64.sqrt()),
            head_out: Conv2d::new(store, rng, "bcm.head.out", c, n_prompts, 1, 1, 1.0),
        })
    }

    /// Channel gate `A = sigmoid(MLP(P))`, `N_p x C`.
    pub fn channel_gate(&self, t: &mut Tape, b: &Binding, protos: Var) -> Var {
        let h = self.gate1.forward(t, b, protos);
        let h = t.relu(h);
        let o = self.gate2.forward(t, b, h);
        t.sigmoid(o)
    }

    /// `Phi_i(u) = < A_i * (p_i W_s), F_sup(u) W_q >`, `N_p x (h*w)`.
    pub fn coarse_proposals(&self, t: &mut Tape, b: &Binding, protos: Var, f_sup: Var) -> Result<Var> {
        let (np, c) = t.shape(protos);
        if np != self.n_prompts || c != self.channels || t.shape(f_sup).1 != c {
            return Err(FobError::Shape(format!(
                "proposals need {} x {} prototypes and C={} features",
                self.n_prompts, self.channels, self.channels
            )));
        }
        let gate = self.channel_gate(t, b, protos);
        let ps = self.w_s.forward(t, b, protos);
        let ps = t.mul(gate, ps);
        let fq = self.w_q.forward(t, b, f_sup);
        let fq_t = t.transpose(fq);
        Ok(t.matmul(ps, fq_t))
    }

    /// Per-key attention bias `ReLU(conv1x1(Phi))`, `1 x (h*w)`.
    pub fn attention_bias(&self, t: &mut Tape, b: &Binding, proposals: Var) -> Var {
        let pt = t.transpose(proposals);
        let z = self.bias_conv.forward(t, b, pt);
        let z = t.relu(z);
        t.transpose(z)
    }

    /// Transformer layer over pixel tokens with an additive key bias.
    pub fn attention_layer(&self, t: &mut Tape, b: &Binding, x: Var, bias: Var) -> Var {
        let q = self.att_q.forward(t, b, x);
        let k = self.att_k.forward(t, b, x);
        let v = self.att_v.forward(t, b, x);
        let dh = self.channels / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = t.slice_cols(q, hd * dh, dh);
            let kh = t.slice_cols(k, hd * dh, dh);
            let vh = t.slice_cols(v, hd * dh, dh);
            outs.push(t.attention(qh, kh, vh, bias, scale));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        let mha = self.att_o.forward(t, b, cat);
        let r1 = t.add(mha, x);
        let x1 = self.ln1.forward(t, b, r1);
        let h = self.ffn1.forward(t, b, x1);
        let h = t.relu(h);
        let f = self.ffn2.forward(t, b, h);
        let r2 = t.add(f, x1);
        self.ln2.forward(t, b, r2)
    }

    pub fn masked_attention_block(&self, t: &mut Tape, b: &Binding, f_sup: Var, proposals: Var) -> Var {
        let bias = self.attention_bias(t, b, proposals);
        self.attention_layer(t, b, f_sup, bias)
    }

    /// `sigmoid(conv1x1(ReLU(conv3x3(F_m))))`, transposed to `N_p x (h*w)`.
    pub fn predict_heatmaps(&self, t: &mut Tape, b: &Binding, f_m: Var, h: usize, w: usize) -> Var {
        let (y, _, _) = self.head_conv.forward(t, b, f_m, h, w);
        let y = t.relu(y);
        let (z, _, _) = self.head_out.forward(t, b, y, h, w);
        let s = t.sigmoid(z);
        t.transpose(s)
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        b: &Binding,
        f_q: Var,
        protos: Var,
        p_fg: Var,
        h: usize,
        w: usize,
    ) -> Result<BcmOutput> {
        let suppressed = suppress(t, f_q, p_fg)?;
        let proposals = self.coarse_proposals(t, b, protos, suppressed.features)?;
        let modulated = self.masked_attention_block(t, b, suppressed.features, proposals);
        let heatmaps = self.predict_heatmaps(t, b, modulated, h, w);
        Ok(BcmOutput { suppressed, proposals, modulated, heatmaps })
    }
}

/// Attention probabilities of a single head, `softmax(scale q k^T + bias)`.
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>, bias: &[f64], scale: f64) -> Array2<f64> {
    let mut logits = q.dot(&k.t()) * scale;
    for mut row in logits.rows_mut() {
        for (l, b) in row.iter_mut().zip(bias) {
            *l += b;
        }
    }
    crate::autodiff::softmax_rows(&logits)
}

/// Argmax of every heatmap row, in channel order.
pub fn extract_coarse_prompts(heatmaps: &Array2<f64>, h: usize, w: usize) -> Vec<Point2D> {
    assert_eq!(heatmaps.ncols(), h * w, "heatmap width");
    heatmaps
        .rows()
        .into_iter()
        .map(|row| {
            let i = argmax_index(row.as_slice().expect("contiguous heatmap row"));
            Point2D::new((i / w) as f64, (i % w) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gaussian_stack;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn bcm(c: usize, np: usize, heads: usize) -> (ParamStore, Bcm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Bcm::new(&mut store, &mut rng, c, np, heads, 2 * c).unwrap();
        (store, m)
    }

    #[test]
    fn suppression_cases() {
        let f = FeatureMap::new(1, 3, array![[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]]);
        let (sup, corr) = suppress_foreground(&f, &[1.0, 0.0]).unwrap();
        assert_eq!(corr.raw, vec![1.0, 0.0, -1.0]);
        assert_eq!(sup.data, array![[0.0, 0.0], [0.0, 3.0], [-2.0, 0.0]]);
        assert_relative_eq!(corr.calibrated[1], 0.5);
        assert_eq!(corr.calibrated[0], 1.0 - CALIBRATION_FLOOR);
        assert_eq!(corr.calibrated[2], CALIBRATION_FLOOR);
        assert!(matches!(suppress_foreground(&f, &[0.0, 0.0]), Err(FobError::DegeneratePrototype(_))));
    }

    #[test]
    fn zero_pixel_has_zero_correlation() {
        let f = FeatureMap::new(1, 1, array![[0.0, 0.0]]);
        let (_, corr) = suppress_foreground(&f, &[1.0, 1.0]).unwrap();
        assert_eq!(corr.raw, vec![0.0]);
    }

    #[test]
    fn scalar_proposal_fixture() {
        let (mut store, m) = bcm(1, 1, 1);
        *store.get_mut(m.w_s.weight) = array![[1.0]];
        *store.get_mut(m.w_q.weight) = array![[1.0]];
        store.get_mut(m.gate2.weight).fill(0.0);
        store.get_mut(m.gate2.bias.unwrap()).fill(0.0);
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let (pv, fv) = (t.constant(array![[2.0]]), t.constant(array![[3.0]]));
        let phi = m.coarse_proposals(&mut t, &b, pv, fv).unwrap();
        assert_eq!(t.value(phi)[[0, 0]], 3.0);
    }

    #[test]
    fn zero_prototypes_give_zero_proposals_and_unbiased_layer() {
        let (mut store, m) = bcm(8, 3, 4);
        store.get_mut(m.bias_conv.bias.unwrap()).fill(-0.5);
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let protos = t.constant(Array2::zeros((3, 8)));
        let f = t.constant(Array2::from_shape_fn((16, 8), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0));
        let phi = m.coarse_proposals(&mut t, &b, protos, f).unwrap();
        assert!(t.value(phi).iter().all(|v| *v == 0.0));
        assert_eq!(t.shape(phi), (3, 16));
        let biased = m.masked_attention_block(&mut t, &b, f, phi);
        let zero = t.constant(Array2::zeros((1, 16)));
        let plain = m.attention_layer(&mut t, &b, f, zero);
        assert_eq!(t.value(biased), t.value(plain));
        assert_eq!(t.shape(biased), (16, 8));
    }

    #[test]
    fn large_key_bias_dominates_attention() {
        let q = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let k = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.2) - j as f64 * 0.15);
        let mut bias = vec![0.0; 6];
        bias[4] = 10.0;
        let a = attention_weights(&q, &k, &bias, 1.0);
        for row in a.rows() {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert_eq!(argmax_index(row.as_slice().unwrap()), 4);
        }
    }

    #[test]
    fn head_range_and_zero_weights() {
        let (mut store, m) = bcm(8, 3, 2);
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let f = t.constant(Array2::from_shape_fn((25, 8), |(i, j)| ((i + j) % 3) as f64));
        let hm = m.predict_heatmaps(&mut t, &b, f, 5, 5);
        assert_eq!(t.shape(hm), (3, 25));
        assert!(t.value(hm).iter().all(|v| *v > 0.0 && *v < 1.0));
        for id in [m.head_conv.weight, m.head_conv.bias, m.head_out.weight, m.head_out.bias] {
            store.get_mut(id).fill(0.0);
        }
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let f = t.constant(Array2::ones((25, 8)));
        let hm = m.predict_heatmaps(&mut t, &b, f, 5, 5);
        assert!(t.value(hm).iter().all(|v| *v == 0.5));
    }

    #[test]
    fn coarse_prompts_from_gaussians_and_ties() {
        let pts = vec![Point2D::new(3.0, 7.0), Point2D::new(10.0, 1.0)];
        let stack = gaussian_stack(&pts, 2.0, 12, 12).unwrap();
        assert_eq!(extract_coarse_prompts(&stack, 12, 12), pts);
        let flat = Array2::from_elem((3, 16), 0.25);
        assert_eq!(extract_coarse_prompts(&flat, 4, 4), vec![Point2D::new(0.0, 0.0); 3]);
    }
}
