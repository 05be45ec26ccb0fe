//! Multi-channel float images, resizing and PNG/PGM I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::autodiff::RowMap;
use crate::error::{FobError, Result};
use crate::geometry::BinaryMask;

/// Row-major image with interleaved channels, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * channels, "image data length");
        Self { h, w, channels, data }
    }

    pub fn gray(h: usize, w: usize, data: Vec<f64>) -> Self {
        Self::new(h, w, 1, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.w + c) * self.channels + ch]
    }

    /// Channel mean at a pixel.
    pub fn intensity(&self, r: usize, c: usize) -> f64 {
        let base = (r * self.w + c) * self.channels;
        self.data[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }

    /// `(h*w) x channels` matrix view of the pixels.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.h * self.w, self.channels), self.data.clone()).expect("image shape")
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let map = RowMap::bilinear_resize(self.h, self.w, h, w);
        let out = map.apply(&self.to_matrix());
        Image::new(h, w, self.channels, out.into_iter().collect())
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| FobError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
        Ok(from_dynamic(&img))
    }

    /// Writes channel 0 (or the grey image) as 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: GrayImage = ImageBuffer::from_fn(self.w as u32, self.h as u32, |x, y| {
            let v = self.intensity(y as usize, x as usize);
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        buf.save(path)?;
        Ok(())
    }
}

fn from_dynamic(img: &DynamicImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let has_color = img.color().has_color();
    if has_color {
        let rgb = img.to_rgb32f();
        Image::new(h, w, 3, rgb.into_raw().into_iter().map(f64::from).collect())
    } else {
        let g = img.to_luma32f();
        Image::gray(h, w, g.into_raw().into_iter().map(f64::from).collect())
    }
}

/// Nearest-neighbour mask resize (half-pixel centres).
pub fn resize_mask_nearest(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    let (ih, iw) = mask.dims();
    if (ih, iw) == (h, w) {
        return mask.clone();
    }
    BinaryMask::from_fn(h, w, |r, c| {
        let sr = (((r as f64 + 0.5) * ih as f64 / h as f64).floor() as usize).min(ih - 1);
        let sc = (((c as f64 + 0.5) * iw as f64 / w as f64).floor() as usize).min(iw - 1);
        mask.get(sr, sc)
    })
}

/// Loads a mask image and thresholds it at half of full scale. Masks with
/// more than two distinct grey levels are rejected as non-binary.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| FobError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    let g = img.to_luma32f();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.into_raw();
    let mut levels: Vec<f32> = Vec::new();
    for &v in &raw {
        if !levels.iter().any(|l| (l - v).abs() < 1e-6) {
            levels.push(v);
            if levels.len() > 2 {
                return Err(FobError::Load {
                    path: path.to_path_buf(),
                    msg: "mask is not binary (more than two grey levels)".into(),
                });
            }
        }
    }
    let data = raw.iter().map(|&v| (v >= 0.5) as u8).collect();
    BinaryMask::from_vec(h, w, data)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let buf: GrayImage =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    buf.save(path)?;
    Ok(())
}
