//! Stochastic augmentations for contrastive pre-training: random
//! crop-resize, horizontal flip, and color jitter. All operate on a
//! single CHW image slice and are driven by an explicit RNG so parallel
//! workers stay reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Applies the full augmentation pipeline once.
pub fn augment_view(img: &[f64], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = random_crop_resize(img, c, h, w, rng);
    if rng.gen_bool(0.5) {
        hflip_inplace(&mut out, c, h, w);
    }
    color_jitter_inplace(&mut out, c, h, w, rng);
    out
}

/// Crops a random square covering 60-100% of each side, then resizes
/// back to (h, w) with bilinear interpolation.
pub fn random_crop_resize(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let scale: f64 = rng.gen_range(0.6..=1.0);
    let ch = ((h as f64) * scale).round().max(1.0) as usize;
    let cw = ((w as f64) * scale).round().max(1.0) as usize;
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let src = &img[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            // Map output pixel centers into the crop window.
            let fy = (y as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
            let y0 = fy.floor().clamp(0.0, (ch - 1) as f64) as usize;
            let y1 = (y0 + 1).min(ch - 1);
            let ty = (fy - y0 as f64).clamp(0.0, 1.0);
            for x in 0..w {
                let fx = (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                let x0 = fx.floor().clamp(0.0, (cw - 1) as f64) as usize;
                let x1 = (x0 + 1).min(cw - 1);
                let tx = (fx - x0 as f64).clamp(0.0, 1.0);
                let p00 = src[(oy + y0) * w + ox + x0];
                let p01 = src[(oy + y0) * w + ox + x1];
                let p10 = src[(oy + y1) * w + ox + x0];
                let p11 = src[(oy + y1) * w + ox + x1];
                let top = p00 + tx * (p01 - p00);
                let bot = p10 + tx * (p11 - p10);
                dst[y * w + x] = top + ty * (bot - top);
            }
        }
    }
    out
}

pub fn hflip_inplace(img: &mut [f64], c: usize, h: usize, w: usize) {
    for ci in 0..c {
        for y in 0..h {
            let row = &mut img[ci * h * w + y * w..ci * h * w + (y + 1) * w];
            row.reverse();
        }
    }
}

/// Per-channel affine jitter, clamped back into [0, 1].
pub fn color_jitter_inplace(img: &mut [f64], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    for ci in 0..c {
        let scale: f64 = rng.gen_range(0.8..1.2);
        let shift: f64 = rng.gen_range(-0.1..0.1);
        for v in &mut img[ci * h * w..(ci + 1) * h * w] {
            *v = (*v * scale + shift).clamp(0.0, 1.0);
        }
    }
}
