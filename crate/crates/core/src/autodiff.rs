//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the [`Tape`] is an `Array2<f64>`. Spatial tensors are kept
//! flat: a feature map of size `H x W x C` is a `(H*W) x C` matrix with pixels
//! in row-major order, and a stack of `N` maps is `N x (H*W)`.
//!
//! The tape is append-only. Values are computed eagerly when an op is pushed,
//! and [`Tape::backward`] walks the nodes in reverse. Only nodes that depend on
//! a [`Tape::param`] leaf receive gradients.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over a flat `(h*w) x c_in` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, c_in: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        assert!(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "kernel larger than padded input");
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        Self { h, w, c_in, kernel, stride, pad, out_h, out_w }
    }

    /// Width of an im2col row: `kernel * kernel * c_in`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }
}

/// Sparse row-linear map: output row `i` is `sum_j w_ij * input_row_j`.
#[derive(Clone, Debug)]
pub struct RowMap {
    pub in_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    /// Bilinear resampling between pixel grids (half-pixel centers, edge clamped).
    pub fn bilinear_resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let axis = |n_in: usize, n_out: usize, o: usize| -> (usize, usize, f64) {
            let scale = n_in as f64 / n_out as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut rows = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(in_h, out_h, oy);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(in_w, out_w, ox);
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (idx, wgt) in [
                    (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * in_w + x1, (1.0 - fy) * fx),
                    (y1 * in_w + x0, fy * (1.0 - fx)),
                    (y1 * in_w + x1, fy * fx),
                ] {
                    if wgt == 0.0 {
                        continue;
                    }
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
                rows.push(taps);
            }
        }
        Self { in_rows: in_h * in_w, rows }
    }

    pub fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        assert_eq!(input.nrows(), self.in_rows, "row map input size");
        let c = input.ncols();
        let mut out = Array2::zeros((self.rows.len(), c));
        for (i, taps) in self.rows.iter().enumerate() {
            let mut row = out.row_mut(i);
            for &(j, w) in taps {
                row.scaled_add(w, &input.row(j));
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Clamp(Var, Vec<f64>, Vec<f64>),
    SoftmaxRows(Var),
    LayerNormRows { src: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Im2Col(Var, ConvGeom),
    Resample(Var, Arc<RowMap>),
    Bilinear { feat: Var, pts: Var, h: usize, w: usize },
    CosineRows(Var, Var),
    Attention { q: Var, k: Var, v: Var, bias: Var, scale: f64, probs: Array2<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | AddCol(a, b)
            | MulRow(a, b) | MulCol(a, b) | MulScalar(a, b) | CosineRows(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a) | Relu(a) | Sigmoid(a) | Tanh(a) | Exp(a) | Ln(a) | Powf(a, _)
            | Clamp(a, _, _) | SoftmaxRows(a) | SumAll(a) | SumRows(a) | SumCols(a) | Transpose(a)
            | Reshape(a) | SliceCols(a, _) | SliceRows(a, _) | Im2Col(a, _) | Resample(a, _) => {
                vec![*a]
            }
            LayerNormRows { src, .. } => vec![*src],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            Bilinear { feat, pts, .. } => vec![*feat, *pts],
            Attention { q, k, v, bias, .. } => vec![*q, *k, *v, *bias],
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a [`Tape`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- binary ops ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.dim(), (1, va.ncols()), "add_row shapes");
        let out = va + vb;
        self.push(out, Op::AddRow(a, b))
    }

    /// `a (m x n) + b (m x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.dim(), (va.nrows(), 1), "add_col shapes");
        let out = va + vb;
        self.push(out, Op::AddCol(a, b))
    }

    /// `a (m x n) * b (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.dim(), (1, va.ncols()), "mul_row shapes");
        let out = va * vb;
        self.push(out, Op::MulRow(a, b))
    }

    /// `a (m x n) * b (m x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.dim(), (va.nrows(), 1), "mul_col shapes");
        let out = va * vb;
        self.push(out, Op::MulCol(a, b))
    }

    /// `a * s` with `s` a `1 x 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a 1x1 scale");
        let k = self.value(s)[[0, 0]];
        let out = self.value(a) * k;
        self.push(out, Op::MulScalar(a, s))
    }

    // ---- unary ops ----------------------------------------------------

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::Shift(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).mapv(|x| x.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let n = self.value(a).ncols();
        self.clamp_cols(a, vec![lo; n], vec![hi; n])
    }

    /// Per-column clamp bounds.
    pub fn clamp_cols(&mut self, a: Var, lo: Vec<f64>, hi: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(lo.len(), va.ncols());
        assert_eq!(hi.len(), va.ncols());
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = x.clamp(lo[j], hi[j]);
            }
        }
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let mut xhat = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNormRows { src: a, xhat, inv_std })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumRows(a))
    }

    /// Column sums as a `1 x n` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumCols(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape element count");
        let data: Vec<f64> = va.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(out, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    // ---- spatial ops --------------------------------------------------

    /// Unfold `k x k` patches (zero padded) into rows of length `k*k*c_in`.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let va = self.value(a);
        assert_eq!(va.dim(), (geom.h * geom.w, geom.c_in), "im2col input shape");
        let out = im2col(va, &geom);
        self.push(out, Op::Im2Col(a, geom))
    }

    pub fn resample(&mut self, a: Var, map: Arc<RowMap>) -> Var {
        let out = map.apply(self.value(a));
        self.push(out, Op::Resample(a, map))
    }

    /// Bilinear lookup of `pts (k x 2)` given as `(row, col)` into a flat
    /// `(h*w) x c` map. Points are clamped into the grid first; the
    /// coordinate gradient is zero along a clamped axis.
    pub fn bilinear(&mut self, feat: Var, pts: Var, h: usize, w: usize) -> Var {
        let (vf, vp) = (self.value(feat), self.value(pts));
        assert_eq!(vf.nrows(), h * w, "bilinear feature rows");
        assert_eq!(vp.ncols(), 2, "bilinear points are (row, col)");
        let c = vf.ncols();
        let mut out = Array2::zeros((vp.nrows(), c));
        for (i, p) in vp.rows().into_iter().enumerate() {
            let cell = BilinearCell::new(p[0], p[1], h, w);
            let mut row = out.row_mut(i);
            for (idx, wt) in cell.taps(w) {
                row.scaled_add(wt, &vf.row(idx));
            }
        }
        self.push(out, Op::Bilinear { feat, pts, h, w })
    }

    /// Cosine similarity of every row of `x (m x c)` with `p (1 x c)`; rows
    /// with zero norm get similarity 0.
    pub fn cosine_rows(&mut self, x: Var, p: Var) -> Var {
        let (vx, vp) = (self.value(x), self.value(p));
        assert_eq!(vp.dim(), (1, vx.ncols()), "cosine_rows shapes");
        let pn = vp.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = Array2::zeros((vx.nrows(), 1));
        for (i, row) in vx.rows().into_iter().enumerate() {
            let xn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if xn > 0.0 && pn > 0.0 {
                out[[i, 0]] = row.dot(&vp.row(0)) / (xn * pn);
            }
        }
        self.push(out, Op::CosineRows(x, p))
    }

    /// One attention head: `softmax(scale * q k^T + bias) v`, with `bias` a
    /// `1 x n_keys` row added to every query row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Var, scale: f64) -> Var {
        let (vq, vk, vv, vb) = (self.value(q), self.value(k), self.value(v), self.value(bias));
        assert_eq!(vq.ncols(), vk.ncols(), "attention q/k width");
        assert_eq!(vk.nrows(), vv.nrows(), "attention k/v rows");
        assert_eq!(vb.dim(), (1, vk.nrows()), "attention bias shape");
        let mut logits = vq.dot(&vk.t());
        logits *= scale;
        logits += vb;
        let probs = softmax_rows(&logits);
        let out = probs.dot(vv);
        self.push(out, Op::Attention { q, k, v, bias, scale, probs })
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.dim(), self.nodes[v.0].value.dim(), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulRow(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    let prod = g * self.value(*a);
                    self.acc(grads, *b, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    let prod = g * self.value(*a);
                    self.acc(grads, *b, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s)[[0, 0]];
                if self.ng(*a) {
                    self.acc(grads, *a, g * k);
                }
                if self.ng(*s) {
                    let d = (g * self.value(*a)).sum();
                    self.acc(grads, *s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Shift(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * y),
            Op::Ln(a) => self.acc(grads, *a, g / self.value(*a)),
            Op::Powf(a, p) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= p * x.powf(p - 1.0));
                self.acc(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (mut drow, xrow) in d.rows_mut().into_iter().zip(x.rows()) {
                    for (j, (dv, xv)) in drow.iter_mut().zip(xrow.iter()).enumerate() {
                        if *xv < lo[j] || *xv > hi[j] {
                            *dv = 0.0;
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => self.acc(grads, *a, softmax_rows_backward(y, g)),
            Op::LayerNormRows { src, xhat, inv_std } => {
                let n = xhat.ncols() as f64;
                let mut d = Array2::zeros(xhat.dim());
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let sum_g = gr.sum();
                    let sum_gx = gr.dot(&xr);
                    let is = inv_std[r];
                    for j in 0..drow.len() {
                        drow[j] = is / n * (n * gr[j] - sum_g - xr[j] * sum_gx);
                    }
                }
                self.acc(grads, *src, d);
            }
            Op::SumAll(a) => {
                let k = g[[0, 0]];
                self.acc(grads, *a, Array2::from_elem(self.shape(*a), k));
            }
            Op::SumRows(a) => {
                let (m, n) = self.shape(*a);
                let d = Array2::from_shape_fn((m, n), |(i, _)| g[[i, 0]]);
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let (m, n) = self.shape(*a);
                let d = Array2::from_shape_fn((m, n), |(_, j)| g[[0, j]]);
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::Reshape(a) => {
                let data: Vec<f64> = g.iter().copied().collect();
                let d = Array2::from_shape_vec(self.shape(*a), data).expect("reshape grad");
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let m = self.shape(*p).0;
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![off..off + m, ..]).to_owned());
                    }
                    off += m;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::Im2Col(a, geom) => self.acc(grads, *a, col2im(g, geom)),
            Op::Resample(a, map) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, taps) in map.rows.iter().enumerate() {
                    for &(j, w) in taps {
                        d.row_mut(j).scaled_add(w, &g.row(i));
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Bilinear { feat, pts, h, w } => {
                let vf = self.value(*feat);
                let vp = self.value(*pts);
                let mut dfeat = if self.ng(*feat) { Some(Array2::zeros(vf.dim())) } else { None };
                let mut dpts = Array2::zeros(vp.dim());
                for (i, p) in vp.rows().into_iter().enumerate() {
                    let cell = BilinearCell::new(p[0], p[1], *h, *w);
                    let gi = g.row(i);
                    if let Some(df) = dfeat.as_mut() {
                        for (idx, wt) in cell.taps(*w) {
                            df.row_mut(idx).scaled_add(wt, &gi);
                        }
                    }
                    let (dr, dc) = cell.coord_grad(vf, *w, &gi);
                    dpts[[i, 0]] = dr;
                    dpts[[i, 1]] = dc;
                }
                if let Some(df) = dfeat {
                    self.acc(grads, *feat, df);
                }
                if self.ng(*pts) {
                    self.acc(grads, *pts, dpts);
                }
            }
            Op::CosineRows(x, p) => {
                let vx = self.value(*x);
                let vp = self.value(*p);
                let pr = vp.row(0);
                let pn = pr.dot(&pr).sqrt();
                let mut dx = Array2::zeros(vx.dim());
                let mut dp = Array2::zeros(vp.dim());
                if pn > 0.0 {
                    for (i, xr) in vx.rows().into_iter().enumerate() {
                        let xn = xr.dot(&xr).sqrt();
                        if xn == 0.0 {
                            continue;
                        }
                        let c = y[[i, 0]];
                        let gi = g[[i, 0]];
                        let inv = 1.0 / (xn * pn);
                        for j in 0..xr.len() {
                            dx[[i, j]] = gi * (pr[j] * inv - c * xr[j] / (xn * xn));
                            dp[[0, j]] += gi * (xr[j] * inv - c * pr[j] / (pn * pn));
                        }
                    }
                }
                if self.ng(*x) {
                    self.acc(grads, *x, dx);
                }
                if self.ng(*p) {
                    self.acc(grads, *p, dp);
                }
            }
            Op::Attention { q, k, v, bias, scale, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                if self.ng(*v) {
                    self.acc(grads, *v, probs.t().dot(g));
                }
                let dprobs = g.dot(&vv.t());
                let dlogits = softmax_rows_backward(probs, &dprobs);
                if self.ng(*bias) {
                    self.acc(grads, *bias, dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*q) {
                    self.acc(grads, *q, dlogits.dot(vk) * *scale);
                }
                if self.ng(*k) {
                    self.acc(grads, *k, dlogits.t().dot(vq) * *scale);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn softmax_rows_backward(y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(y.dim());
    for ((mut drow, yrow), grow) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
        let dot = yrow.dot(&grow);
        for j in 0..drow.len() {
            drow[j] = yrow[j] * (grow[j] - dot);
        }
    }
    d
}

pub(crate) fn im2col(x: &Array2<f64>, geom: &ConvGeom) -> Array2<f64> {
    let ConvGeom { h, w, c_in, kernel, stride, pad, out_h, out_w } = *geom;
    let mut out = Array2::zeros((out_h * out_w, geom.patch_len()));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut row = out.row_mut(oy * out_w + ox);
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = x.row(iy as usize * w + ix as usize);
                    let base = (ky * kernel + kx) * c_in;
                    row.slice_mut(s![base..base + c_in]).assign(&src);
                }
            }
        }
    }
    out
}

fn col2im(g: &Array2<f64>, geom: &ConvGeom) -> Array2<f64> {
    let ConvGeom { h, w, c_in, kernel, stride, pad, out_h, out_w } = *geom;
    let mut d = Array2::zeros((h * w, c_in));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let grow = g.row(oy * out_w + ox);
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * kernel + kx) * c_in;
                    d.row_mut(iy as usize * w + ix as usize)
                        .scaled_add(1.0, &grow.slice(s![base..base + c_in]));
                }
            }
        }
    }
    d
}

/// The four-neighbour cell used for bilinear lookup of a clamped point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearCell {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    fr: f64,
    fc: f64,
    row_free: bool,
    col_free: bool,
}

impl BilinearCell {
    pub(crate) fn new(row: f64, col: f64, h: usize, w: usize) -> Self {
        let rmax = (h - 1) as f64;
        let cmax = (w - 1) as f64;
        let row_free = (0.0..=rmax).contains(&row);
        let col_free = (0.0..=cmax).contains(&col);
        let r = row.clamp(0.0, rmax);
        let c = col.clamp(0.0, cmax);
        let r0 = (r.floor() as usize).min(h.saturating_sub(2));
        let c0 = (c.floor() as usize).min(w.saturating_sub(2));
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        Self {
            r0,
            r1,
            c0,
            c1,
            fr: r - r0 as f64,
            fc: c - c0 as f64,
            row_free: row_free && h > 1,
            col_free: col_free && w > 1,
        }
    }

    pub(crate) fn taps(&self, w: usize) -> [(usize, f64); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.r0 * w + self.c0, (1.0 - fr) * (1.0 - fc)),
            (self.r0 * w + self.c1, (1.0 - fr) * fc),
            (self.r1 * w + self.c0, fr * (1.0 - fc)),
            (self.r1 * w + self.c1, fr * fc),
        ]
    }

    fn coord_grad(
        &self,
        feat: &Array2<f64>,
        w: usize,
        g: &ndarray::ArrayView1<f64>,
    ) -> (f64, f64) {
        let f00 = feat.row(self.r0 * w + self.c0);
        let f01 = feat.row(self.r0 * w + self.c1);
        let f10 = feat.row(self.r1 * w + self.c0);
        let f11 = feat.row(self.r1 * w + self.c1);
        let (fr, fc) = (self.fr, self.fc);
        let mut dr = 0.0;
        let mut dc = 0.0;
        for j in 0..g.len() {
            if self.row_free {
                dr += g[j] * ((1.0 - fc) * (f10[j] - f00[j]) + fc * (f11[j] - f01[j]));
            }
            if self.col_free {
                dc += g[j] * ((1.0 - fr) * (f01[j] - f00[j]) + fr * (f11[j] - f10[j]));
            }
        }
        (dr, dc)
    }
}
