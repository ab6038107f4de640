//! Seeded photometric and geometric augmentation of `[3, H, W]` images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ppm::Image;
use crate::tensor::Tensor;

/// One augmentation step. Random parameters are drawn from the caller's rng.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    /// Multiply every value by a factor drawn from `[min, max]`.
    Brightness { min: f64, max: f64 },
    /// Zoom about the image centre by a factor drawn from `[min, max]`, bilinear.
    Scale { min: f64, max: f64 },
    /// Rotate counter-clockwise by one of `angles` (degrees) plus a uniform
    /// offset in `[-jitter, jitter]`.
    Rotate { angles: Vec<f64>, jitter: f64 },
    /// Horizontal flip with the given probability.
    Mirror { probability: f64 },
}

impl AugmentOp {
    /// Brightness, scaling, rotation and mirroring with the library's default ranges.
    pub fn defaults() -> Vec<AugmentOp> {
        vec![
            AugmentOp::Brightness { min: 0.7, max: 1.3 },
            AugmentOp::Scale { min: 0.8, max: 1.2 },
            AugmentOp::Rotate {
                angles: vec![90.0, 180.0, 270.0],
                jitter: 15.0,
            },
            AugmentOp::Mirror { probability: 0.5 },
        ]
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, min: f64, max: f64) -> f64 {
    if max > min {
        rng.gen_range(min..=max)
    } else {
        min
    }
}

/// Apply `ops` in order. The result is clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(image: &Image, ops: &[AugmentOp], rng: &mut R) -> Image {
    let mut out = image.clone();
    for op in ops {
        out = match op {
            AugmentOp::Brightness { min, max } => {
                let f = draw(rng, *min, *max) as f32;
                out.map(|v| v * f)
            }
            AugmentOp::Scale { min, max } => zoom(&out, draw(rng, *min, *max)),
            AugmentOp::Rotate { angles, jitter } => {
                let base = if angles.is_empty() {
                    0.0
                } else {
                    angles[rng.gen_range(0..angles.len())]
                };
                rotate(&out, base + draw(rng, -jitter, *jitter))
            }
            AugmentOp::Mirror { probability } => {
                if rng.gen_bool(probability.clamp(0.0, 1.0)) {
                    mirror(&out)
                } else {
                    out
                }
            }
        };
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

fn dims(image: &Image) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

fn remap(image: &Image, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x);
                data.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(&[c, h, w], data).expect("same shape")
}

pub fn mirror(image: &Image) -> Image {
    let w = dims(image).2;
    remap(image, |y, x| (y, w - 1 - x))
}

/// Counter-clockwise rotation about the centre. Multiples of 90° on square
/// images are exact permutations; other angles use nearest-neighbour sampling
/// with edge clamping.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    let (_, h, w) = dims(image);
    let turns = degrees / 90.0;
    if turns.fract() == 0.0 && (h == w || turns.rem_euclid(2.0) == 0.0) {
        let n = h;
        return match turns.rem_euclid(4.0) as u32 {
            0 => image.clone(),
            1 => remap(image, |y, x| (x, n - 1 - y)),
            2 => remap(image, |y, x| (h - 1 - y, w - 1 - x)),
            _ => remap(image, |y, x| (n - 1 - x, y)),
        };
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    remap(image, |y, x| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // Inverse of a counter-clockwise rotation in image coordinates (y down).
        let sx = cos * dx - sin * dy + cx;
        let sy = sin * dx + cos * dy + cy;
        (
            sy.round().clamp(0.0, (h - 1) as f64) as usize,
            sx.round().clamp(0.0, (w - 1) as f64) as usize,
        )
    })
}

/// Zoom about the centre by `factor` (> 1 enlarges), bilinear with edge clamping.
pub fn zoom(image: &Image, factor: f64) -> Image {
    let (c, h, w) = dims(image);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let tap = |p: usize, centre: f64, len: usize| {
        let s = (centre + (p as f64 - centre) / factor).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |y: usize, x: usize| plane[y * w + x] as f64;
        for y in 0..h {
            let (y0, y1, wy) = tap(y, cy, h);
            for x in 0..w {
                let (x0, x1, wx) = tap(x, cx, w);
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                data.push((top * (1.0 - wy) + bottom * wy) as f32);
            }
        }
    }
    Tensor::new(&[c, h, w], data).expect("same shape")
}
