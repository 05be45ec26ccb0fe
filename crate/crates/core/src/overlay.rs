//! Overlay rendering: the query image with prompt markers and mask contours.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::geometry::{BinaryMask, Point2D};
use crate::inference::PromptSet;
use crate::raster::Image;

const FG: Rgb<u8> = Rgb([40, 220, 60]);
const BG: Rgb<u8> = Rgb([235, 40, 40]);
const PRED: Rgb<u8> = Rgb([250, 210, 0]);
const GT: Rgb<u8> = Rgb([0, 200, 230]);

#[derive(Clone, Debug, Default)]
pub struct Overlay<'a> {
    pub prompts: Option<&'a PromptSet>,
    pub predicted: Option<&'a BinaryMask>,
    pub ground_truth: Option<&'a BinaryMask>,
}

/// Upscaling factor bringing the longer side to at least 256 px.
fn scale_for(h: usize, w: usize) -> u32 {
    (256usize.div_ceil(h.max(w).max(1))).max(1) as u32
}

fn draw_contour(img: &mut RgbImage, mask: &BinaryMask, scale: u32, color: Rgb<u8>) {
    for (r, c) in mask.boundary().pixels() {
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(c as u32 * scale + dx, r as u32 * scale + dy, color);
            }
        }
    }
}

fn draw_marker(img: &mut RgbImage, p: &Point2D, scale: u32, color: Rgb<u8>) {
    let s = scale as f64;
    let (cy, cx) = ((p.row + 0.5) * s, (p.col + 0.5) * s);
    let arm = (s * 1.5).max(3.0) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    for d in -arm..=arm {
        for t in -1..=1 {
            for (y, x) in [(cy as i64 + d, cx as i64 + t), (cy as i64 + t, cx as i64 + d)] {
                if (0..h).contains(&y) && (0..w).contains(&x) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

/// Renders `image` upscaled, with ground-truth and predicted contours and
/// prompt crosses (foreground green, background red).
pub fn render(image: &Image, layers: &Overlay<'_>) -> RgbImage {
    let (h, w) = image.dims();
    let scale = scale_for(h, w);
    let mut out = RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = (image.intensity((y / scale) as usize, (x / scale) as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    if let Some(m) = layers.ground_truth {
        draw_contour(&mut out, m, scale, GT);
    }
    if let Some(m) = layers.predicted {
        draw_contour(&mut out, m, scale, PRED);
    }
    if let Some(p) = layers.prompts {
        let p = p.rescaled((h, w));
        for q in &p.background {
            draw_marker(&mut out, q, scale, BG);
        }
        for q in &p.foreground {
            draw_marker(&mut out, q, scale, FG);
        }
    }
    out
}

pub fn save(image: &Image, layers: &Overlay<'_>, path: &Path) -> Result<()> {
    render(image, layers).save(path)?;
    Ok(())
}
