//! Synthetic shapes dataset.
//!
//! Each sample is one foreground shape on a textured background. The class
//! fixes the shape and a hue family; hue families of neighbouring classes
//! overlap so colour alone does not identify the class.

use std::f32::consts::{PI, TAU};

use rand::Rng as _;

use super::{BinaryMask, RgbImage};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Blob,
    AnnulusSector,
}

pub const SHAPES: [Shape; 8] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Ring,
    Shape::Cross,
    Shape::Bar,
    Shape::Blob,
    Shape::AnnulusSector,
];

impl Shape {
    /// Membership in normalised shape coordinates (unit radius).
    fn contains(self, u: f32, v: f32, phase: f32) -> bool {
        let rho = (u * u + v * v).sqrt();
        match self {
            Shape::Disk => rho <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => v <= 0.5 && v >= -1.0 + u.abs() * (1.5 / 0.866),
            Shape::Ring => (0.55..=1.0).contains(&rho),
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            Shape::Blob => rho <= 0.75 + 0.2 * (3.0 * v.atan2(u) + phase).sin(),
            Shape::AnnulusSector => {
                let theta = v.atan2(u).rem_euclid(TAU);
                (0.4..=1.0).contains(&rho) && theta < 1.5 * PI
            }
        }
    }
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub class: usize,
}

pub fn synth_dataset(n: usize, classes: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least two classes"));
    }
    if size < 16 {
        return Err(Error::invalid("size", format!("{size} is below the 16 pixel minimum")));
    }
    Ok((0..n).map(|i| render_sample(classes, size, &mut rng::derived(seed, 0x5E7, i as u64))).collect())
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn render_sample(classes: usize, size: usize, rng: &mut rng::Rng) -> Sample {
    let class = rng.gen_range(0..classes);
    let shape = SHAPES[class % SHAPES.len()];
    let family = 360.0 * class as f32 / classes as f32;

    let bg_hue = rng.gen_range(0.0..360.0);
    let bg = hsv_to_rgb(bg_hue, rng.gen_range(0.1..0.5), rng.gen_range(0.3..0.8));
    let freq = rng.gen_range(0.2..0.9);
    let angle = rng.gen_range(0.0..PI);
    let (fa, fb) = (angle.cos() * freq, angle.sin() * freq);
    let amp = rng.gen_range(10.0..35.0);

    let fg = hsv_to_rgb(family + rng.gen_range(-90.0..90.0), rng.gen_range(0.55..1.0), rng.gen_range(0.6..1.0));

    let s = size as f32;
    let radius = rng.gen_range(0.18 * s..0.3 * s);
    let margin = radius * 1.15;
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    let rot = rng.gen_range(0.0..TAU);
    let phase = rng.gen_range(0.0..TAU);
    let (sin, cos) = rot.sin_cos();

    let mut mask = BinaryMask::zeros(size, size);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f32 + 0.5 - cx) / radius;
            let dy = (y as f32 + 0.5 - cy) / radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let inside = shape.contains(u, v, phase);
            let pixel = if inside {
                mask.set(x, y, true);
                let n = rng.gen_range(-8.0..8.0);
                fg.map(|c| c + n)
            } else {
                let wave = (fa * x as f32 + fb * y as f32).sin() * amp;
                let n = rng.gen_range(-12.0..12.0);
                bg.map(|c| c + wave + n)
            };
            data.extend(pixel.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    let image = RgbImage::new(size, size, data).expect("buffer sized from loop");
    debug_assert!(mask.count_ones() > 0 && mask.count_ones() < size * size);
    Sample { image, mask, class }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_dataset(100, 8, 32, 42).unwrap();
        let b = synth_dataset(100, 8, 32, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(100, 8, 32, 43).unwrap());
    }

    #[test]
    fn every_mask_has_both_classes() {
        for sample in synth_dataset(200, 8, 32, 7).unwrap() {
            let fg = sample.mask.count_ones();
            assert!(fg > 0 && fg < 32 * 32, "class {} area {fg}", sample.class);
        }
    }

    #[test]
    fn class_histogram_within_three_sigma() {
        let n = 1000usize;
        let k = 8usize;
        let mut counts = vec![0usize; k];
        for sample in synth_dataset(n, k, 16, 3).unwrap() {
            counts[sample.class] += 1;
        }
        let p = 1.0 / k as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            assert!((count as f64 - mean).abs() <= 3.0 * sigma, "class {c}: {count} vs {mean}±{}", 3.0 * sigma);
        }
    }

    #[test]
    fn mask_marks_exactly_the_shape_colour() {
        // Foreground pixels are drawn within ±8 of one colour; check the mask
        // boundary separates the two populations on a low-texture sample.
        let sample = &synth_dataset(1, 2, 48, 11).unwrap()[0];
        let mut fg_sum = [0f64; 3];
        let n = sample.mask.count_ones() as f64;
        for y in 0..48 {
            for x in 0..48 {
                if sample.mask.get(x, y) {
                    let p = sample.image.pixel(x, y);
                    for c in 0..3 {
                        fg_sum[c] += p[c] as f64;
                    }
                }
            }
        }
        let mean = fg_sum.map(|s| s / n);
        for y in 0..48 {
            for x in 0..48 {
                if sample.mask.get(x, y) {
                    let p = sample.image.pixel(x, y);
                    for c in 0..3 {
                        assert!((p[c] as f64 - mean[c]).abs() <= 17.0);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_dataset(0, 8, 32, 0).is_err());
        assert!(synth_dataset(10, 1, 32, 0).is_err());
    }
}
