//! Shared-weight feature extractor.
//!
//! A short strided convolution pyramid. Every stage output is resampled back
//! to the input grid and the stack is fused by a 1x1 convolution, so the
//! features live on the same grid as masks and heatmaps.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RowMap, Tape, Var};
use crate::error::{FobError, Result};
use crate::geometry::FeatureMap;
use crate::layers::Conv2d;
use crate::params::{Binding, ParamStore};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 1, channels: 32, depth: 4, size: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(FobError::InvalidParameter(format!("encoder channels must be >= 8, got {}", self.channels)));
        }
        if self.depth < 1 {
            return Err(FobError::InvalidParameter("encoder depth must be >= 1".into()));
        }
        if self.in_channels < 1 || self.size < 4 {
            return Err(FobError::InvalidParameter("encoder input must be at least 4x4 with one channel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<Conv2d>,
    fuse: Conv2d,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut stages = Vec::with_capacity(cfg.depth);
        let mut size = cfg.size;
        for i in 0..cfg.depth {
            let c_in = if i == 0 { cfg.in_channels } else { c };
            // downsample twice at most, never below 4 px
            let stride = if (1..=2).contains(&i) && size >= 8 { 2 } else { 1 };
            if stride == 2 {
                size = size.div_ceil(2);
            }
            stages.push(Conv2d::new(store, rng, &format!("encoder.stage{i}"), c_in, c, 3, stride, 2f64.sqrt()));
        }
        let fuse = Conv2d::new(store, rng, "encoder.fuse", c * cfg.depth, c, 1, 1, 1.0);
        Ok(Self { cfg, stages, fuse })
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    /// Encodes an `(h*w) x in_channels` input node into `(h*w) x C` features.
    pub fn forward(&self, t: &mut Tape, b: &Binding, input: Var, h: usize, w: usize) -> Result<Var> {
        let (rows, ch) = t.shape(input);
        if rows != h * w || ch != self.cfg.in_channels {
            return Err(FobError::Shape(format!(
                "encoder expects {} x {} input, got {rows} x {ch}",
                h * w,
                self.cfg.in_channels
            )));
        }
        let mut x = input;
        let (mut ch_h, mut ch_w) = (h, w);
        let mut taps = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (y, oh, ow) = conv.forward(t, b, x, ch_h, ch_w);
            x = t.relu(y);
            ch_h = oh;
            ch_w = ow;
            let full = if (oh, ow) == (h, w) {
                x
            } else {
                t.resample(x, Arc::new(RowMap::bilinear_resize(oh, ow, h, w)))
            };
            taps.push(full);
        }
        let stacked = t.concat_cols(&taps);
        let (out, _, _) = self.fuse.forward(t, b, stacked, h, w);
        Ok(out)
    }

    /// Puts an image on the tape (as a constant) and encodes it.
    pub fn encode_image(&self, t: &mut Tape, b: &Binding, image: &Image) -> Result<Var> {
        if image.dims() != (self.cfg.size, self.cfg.size) || image.channels != self.cfg.in_channels {
            return Err(FobError::Shape(format!(
                "encoder expects {s}x{s}x{c} images, got {}x{}x{}",
                image.h,
                image.w,
                image.channels,
                s = self.cfg.size,
                c = self.cfg.in_channels
            )));
        }
        let input = t.constant(image.to_matrix());
        self.forward(t, b, input, image.h, image.w)
    }

    /// Eval-mode convenience: features of one image as a [`FeatureMap`].
    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<FeatureMap> {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let f = self.encode_image(&mut t, &b, image)?;
        Ok(FeatureMap::new(image.h, image.w, t.value(f).clone()))
    }
}
