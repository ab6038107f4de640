//! Procedural class-textured datasets for smoke tests and benchmarks.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{scan_dataset, DatasetManifest};
use super::ppm::{write_ppm, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct ClassTexture {
    color: [f64; 3],
    tint: [f64; 3],
    angle: f64,
    frequency: f64,
    phase: f64,
}

const AMPLITUDE: f64 = 0.22;
const COLOR_JITTER: f64 = 0.04;
const ANGLE_JITTER: f64 = 0.12;
const PHASE_JITTER: f64 = 0.6;
const NOISE_STD: f64 = 0.04;

impl ClassTexture {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            color: [(); 3].map(|_| rng.gen_range(0.2..0.8)),
            tint: [(); 3].map(|_| rng.gen_range(0.3..1.0)),
            angle: rng.gen_range(0.0..PI),
            frequency: rng.gen_range(1.5..5.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn render(&self, size: usize, rng: &mut ChaCha8Rng) -> Image {
        let jitter = |rng: &mut ChaCha8Rng, r: f64| rng.gen_range(-r..=r);
        let color = self.color.map(|c| c + jitter(rng, COLOR_JITTER));
        let angle = self.angle + jitter(rng, ANGLE_JITTER);
        let phase = self.phase + jitter(rng, PHASE_JITTER);
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let (sin, cos) = angle.sin_cos();
        let plane = size * size;
        let mut data = vec![0f32; 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let t = (x as f64 * cos + y as f64 * sin) / size as f64;
                let wave = AMPLITUDE * (2.0 * PI * self.frequency * t + phase).sin();
                for ch in 0..3 {
                    let v = color[ch] + self.tint[ch] * wave + noise.sample(rng);
                    data[ch * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::new(&[3, size, size], data).expect("sized")
    }
}

/// Render `classes × per_class` images of side `size` into memory, ordered by
/// (class, index). Each class is an oriented colour grating; images vary by
/// colour, angle and phase jitter plus pixel noise.
pub fn synth_images(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<Vec<Image>>> {
    if classes < 2 {
        return Err(Error::invalid("synth_dataset", "need at least 2 classes"));
    }
    if per_class == 0 || size == 0 {
        return Err(Error::invalid("synth_dataset", "per_class and size must be positive"));
    }
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed);
    let textures: Vec<ClassTexture> = (0..classes).map(|_| ClassTexture::draw(&mut class_rng)).collect();
    Ok(textures
        .iter()
        .enumerate()
        .map(|(c, tex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            (0..per_class).map(|_| tex.render(size, &mut rng)).collect()
        })
        .collect())
}

/// Write a synthetic dataset as `root/class_XX/img_XXX.ppm` and scan it.
pub fn synth_dataset(root: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    let images = synth_images(classes, per_class, size, seed)?;
    let width = (classes - 1).to_string().len().max(2);
    for (c, imgs) in images.iter().enumerate() {
        let dir = root.join(format!("class_{c:0width$}"));
        std::fs::create_dir_all(&dir)?;
        for (i, img) in imgs.iter().enumerate() {
            write_ppm(&dir.join(format!("img_{i:03}.ppm")), img)?;
        }
    }
    scan_dataset(root, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 2, 1, 8, 0).unwrap();
        assert_eq!((m.num_classes(), m.len()), (2, 2));
        assert!(synth_images(1, 1, 8, 0).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synth_dataset(a.path(), 3, 2, 8, 42).unwrap();
        synth_dataset(b.path(), 3, 2, 8, 42).unwrap();
        for r in &ma.records {
            let rel = r.path.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&r.path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }
}
