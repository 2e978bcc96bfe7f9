//! Deterministic synthetic image generators for desk-scale experiments.
//!
//! Spec strings take the form `synth:<family>:<classes>:<n>:<size>:<seed>`,
//! e.g. `synth:shapes:2:2000:32:7`. Two families:
//!
//! * `shapes` — the class is a geometric shape (disk, square, triangle,
//!   cross) drawn with random color, position, and scale over a noisy
//!   random background with small distractor blobs. Color never predicts
//!   the class, so classifiers must pick up shape structure.
//! * `blobs` — Gaussian color bumps with class-dependent palette and
//!   position; nearly linearly separable, used for quick probes.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::rng_for;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const BACKGROUND_NOISE: f64 = 0.03;
const MIN_SHAPE_CONTRAST: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Shapes,
    Blobs,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub family: Family,
    pub classes: usize,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let err = || {
            Error::Input(format!(
                "bad synthetic dataset spec '{spec}', expected synth:<family>:<classes>:<n>:<size>:<seed>"
            ))
        };
        if parts.len() != 6 || parts[0] != "synth" {
            return Err(err());
        }
        let family = match parts[1] {
            "shapes" => Family::Shapes,
            "blobs" => Family::Blobs,
            _ => return Err(err()),
        };
        let classes: usize = parts[2].parse().map_err(|_| err())?;
        let n: usize = parts[3].parse().map_err(|_| err())?;
        let size: usize = parts[4].parse().map_err(|_| err())?;
        let seed: u64 = parts[5].parse().map_err(|_| err())?;
        if classes == 0 || n == 0 || size < 8 {
            return Err(err());
        }
        if family == Family::Shapes && classes > 4 {
            return Err(Error::Input(format!(
                "shapes family supports up to 4 classes, got {classes}"
            )));
        }
        Ok(SynthSpec {
            family,
            classes,
            n,
            size,
            seed,
        })
    }
}

pub fn generate_from_spec(spec: &str) -> Result<LabeledDataset> {
    generate(SynthSpec::parse(spec)?)
}

pub fn generate(spec: SynthSpec) -> Result<LabeledDataset> {
    let (c, h, w) = (3usize, spec.size, spec.size);
    let stride = c * h * w;
    let mut pixels = vec![0.0; spec.n * stride];
    let mut labels = vec![0usize; spec.n];
    for i in 0..spec.n {
        let label = i % spec.classes;
        labels[i] = label;
        let mut rng = rng_for(spec.seed, "synth-image", i as u64);
        let img = &mut pixels[i * stride..(i + 1) * stride];
        match spec.family {
            Family::Shapes => draw_shapes_image(img, spec.size, label, &mut rng),
            Family::Blobs => draw_blobs_image(img, spec.size, label, spec.classes, &mut rng),
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    LabeledDataset::new(
        Tensor::from_vec(&[spec.n, c, h, w], pixels),
        labels,
        spec.classes,
    )
}

fn draw_shapes_image(img: &mut [f64], size: usize, label: usize, rng: &mut ChaCha8Rng) {
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    for ch in 0..3 {
        img[ch * size * size..(ch + 1) * size * size].fill(bg[ch]);
    }
    // Shape color with guaranteed contrast against the background.
    let mut color: [f64; 3];
    loop {
        color = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let contrast = (0..3).map(|ch| (color[ch] - bg[ch]).abs()).fold(0.0, f64::max);
        if contrast >= MIN_SHAPE_CONTRAST {
            break;
        }
    }
    let s = size as f64;
    let margin = s * 0.3;
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    let r = rng.gen_range(s * 0.20..s * 0.33);
    stamp(img, size, &color, |x, y| shape_coverage(label, cx, cy, r, x, y));

    // Small distractor disks of random color on both classes.
    for _ in 0..rng.gen_range(0..=1usize) {
        let dc: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let dx = rng.gen_range(2.0..s - 2.0);
        let dy = rng.gen_range(2.0..s - 2.0);
        let dr = rng.gen_range(s * 0.04..s * 0.08);
        stamp(img, size, &dc, |x, y| {
            disk_coverage(dx, dy, dr, x, y)
        });
    }
    add_noise(img, BACKGROUND_NOISE, rng);
}

fn shape_coverage(label: usize, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> f64 {
    match label % 4 {
        0 => disk_coverage(cx, cy, r, x, y),
        1 => {
            // Square of matching area.
            let rs = r * 0.886;
            let d = (x - cx).abs().max((y - cy).abs());
            soft(rs - d)
        }
        2 => {
            // Upward triangle via three half-plane distances.
            let (ax, ay) = (cx, cy - 1.2 * r);
            let (bx, by) = (cx - 1.04 * r, cy + 0.6 * r);
            let (px, py) = (cx + 1.04 * r, cy + 0.6 * r);
            let d1 = edge_dist(ax, ay, bx, by, x, y);
            let d2 = edge_dist(bx, by, px, py, x, y);
            let d3 = edge_dist(px, py, ax, ay, x, y);
            soft(d1.min(d2).min(d3))
        }
        _ => {
            // Cross: union of two bars.
            let bar = r * 0.35;
            let h = soft(bar - (y - cy).abs()).min(soft(r - (x - cx).abs()));
            let v = soft(bar - (x - cx).abs()).min(soft(r - (y - cy).abs()));
            h.max(v)
        }
    }
}

fn disk_coverage(cx: f64, cy: f64, r: f64, x: f64, y: f64) -> f64 {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    soft(r - d)
}

/// One-pixel anti-aliased edge.
#[inline]
fn soft(signed: f64) -> f64 {
    (signed + 0.5).clamp(0.0, 1.0)
}

/// Signed distance to the inside of edge (a -> b), counter-clockwise.
fn edge_dist(ax: f64, ay: f64, bx: f64, by: f64, x: f64, y: f64) -> f64 {
    let (ex, ey) = (bx - ax, by - ay);
    let len = (ex * ex + ey * ey).sqrt();
    ((x - ax) * ey - (y - ay) * ex) / len
}

fn stamp(img: &mut [f64], size: usize, color: &[f64; 3], coverage: impl Fn(f64, f64) -> f64) {
    for y in 0..size {
        for x in 0..size {
            let cov = coverage(x as f64, y as f64);
            if cov <= 0.0 {
                continue;
            }
            for ch in 0..3 {
                let p = &mut img[ch * size * size + y * size + x];
                *p += cov * (color[ch] - *p);
            }
        }
    }
}

fn add_noise(img: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    for v in img.iter_mut() {
        // Box-Muller pair; using one draw per pixel keeps it simple.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v += sigma * z;
    }
}

fn draw_blobs_image(
    img: &mut [f64],
    size: usize,
    label: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) {
    for v in img.iter_mut() {
        *v = 0.5;
    }
    let s = size as f64;
    let angle = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
    let cx = s / 2.0 + (s / 4.0) * angle.cos() + rng.gen_range(-2.0..2.0);
    let cy = s / 2.0 + (s / 4.0) * angle.sin() + rng.gen_range(-2.0..2.0);
    let color: [f64; 3] = std::array::from_fn(|ch| {
        let base = 0.5 + 0.45 * (angle + 2.1 * ch as f64).cos();
        (base + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0)
    });
    let sigma = s / 6.0;
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let a = (-d2 / (2.0 * sigma * sigma)).exp();
            for ch in 0..3 {
                let p = &mut img[ch * size * size + y * size + x];
                *p += a * (color[ch] - *p);
            }
        }
    }
    add_noise(img, 0.04, rng);
}
