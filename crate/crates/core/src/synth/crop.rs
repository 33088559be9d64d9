//! Random resized crops with deterministic draw order and bilinear resizing.

use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w: width,
            h: height,
        }
    }
}

/// Geometry of one sampled crop, kept for reproducibility records.
#[derive(Debug, Clone, Copy)]
pub struct CropRecord {
    pub rect: CropRect,
    pub area_frac: f64,
    pub aspect: f64,
}

/// Area fraction uniform in [min_area, max_area], aspect log-uniform in
/// [aspect_lo, aspect_hi], position uniform; sides are clamped to fit. The
/// draw count per call is constant so paired streams stay aligned.
pub fn sample_crop(
    stream: &mut SeedStream,
    height: usize,
    width: usize,
    min_area: f64,
    max_area: f64,
    aspect_lo: f64,
    aspect_hi: f64,
) -> CropRecord {
    let area_frac = stream.uniform_range(min_area, max_area);
    let aspect = stream.uniform_range(aspect_lo.ln(), aspect_hi.ln()).exp();
    let target = area_frac * (height * width) as f64;
    let w = ((target * aspect).sqrt().round() as usize).clamp(1, width);
    let h = ((target / aspect).sqrt().round() as usize).clamp(1, height);
    let x0 = stream.index(width - w + 1);
    let y0 = stream.index(height - h + 1);
    CropRecord {
        rect: CropRect { x0, y0, w, h },
        area_frac,
        aspect,
    }
}

/// Crops `rect` out of a [c, h, w] tensor and resizes to out_h x out_w.
/// A full-frame rect at matching size is returned bit-identically.
pub fn crop_and_resize(src: &Tensor, rect: CropRect, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if rect == CropRect::full(h, w) && out_h == h && out_w == w {
        return src.detached();
    }
    let mut cropped = vec![0.0; c * rect.h * rect.w];
    for ch in 0..c {
        for y in 0..rect.h {
            let src_off = (ch * h + rect.y0 + y) * w + rect.x0;
            let dst_off = (ch * rect.h + y) * rect.w;
            cropped[dst_off..dst_off + rect.w]
                .copy_from_slice(&src.data()[src_off..src_off + rect.w]);
        }
    }
    let resized = bilinear(&cropped, c, rect.h, rect.w, out_h, out_w);
    Tensor::new(vec![c, out_h, out_w], resized).expect("resize shape")
}

/// Half-pixel-center bilinear interpolation, edge-clamped.
fn bilinear(src: &[f64], c: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * out_h * out_w];
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for ch in 0..c {
        let plane = &src[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(in_h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(in_w - 1);
                let wx = fx - x0 as f64;
                let top = plane[y0 * in_w + x0] * (1.0 - wx) + plane[y0 * in_w + x1] * wx;
                let bot = plane[y1 * in_w + x0] * (1.0 - wx) + plane[y1 * in_w + x1] * wx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}
