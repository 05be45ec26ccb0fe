//! Small trainable building blocks on top of [`Tape`].

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::params::{init_uniform, Binding, ParamId, ParamStore};

/// `x W + b` over rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, d_in, d_out, d_in, gain));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, d_out))));
        Self { weight, bias }
    }

    pub fn forward(&self, t: &mut Tape, b: &Binding, x: Var) -> Var {
        let y = t.matmul(x, b[self.weight]);
        match self.bias {
            Some(bias) => t.add_row(y, b[bias]),
            None => y,
        }
    }
}

/// Zero-padded 2-D convolution on flat `(h*w) x c_in` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, fan_in, c_out, fan_in, gain));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, c_out)));
        Self { weight, bias, c_in, c_out, kernel, stride }
    }

    pub fn geometry(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom::new(h, w, self.c_in, self.kernel, self.stride, self.kernel / 2)
    }

    /// Returns the output and its spatial size.
    pub fn forward(&self, t: &mut Tape, b: &Binding, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let geom = self.geometry(h, w);
        let cols = if self.kernel == 1 && self.stride == 1 { x } else { t.im2col(x, geom) };
        let y = t.matmul(cols, b[self.weight]);
        let y = t.add_row(y, b[self.bias]);
        (y, geom.out_h, geom.out_w)
    }
}

/// Per-row layer normalisation with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, t: &mut Tape, b: &Binding, x: Var) -> Var {
        let n = t.layer_norm_rows(x, self.eps);
        let s = t.mul_row(n, b[self.gamma]);
        t.add_row(s, b[self.beta])
    }
}
