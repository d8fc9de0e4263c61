use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::RgbImage;
use crate::rng;
use crate::{Error, Result};

const MIN_SIDE: usize = 8;

/// Augmentation recipe for the two contrastive views of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugSpec {
    /// Fraction of the image area kept by the random crop.
    pub crop_scale_range: (f32, f32),
    pub flip_prob: f32,
    /// Brightness, contrast and saturation factors are drawn from `[1 - s, 1 + s]`.
    pub color_jitter_strength: f32,
    pub blur_sigma_range: (f32, f32),
    pub seed: u64,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.5, 1.0),
            flip_prob: 0.5,
            color_jitter_strength: 0.4,
            blur_sigma_range: (0.0, 1.5),
            seed: 0,
        }
    }
}

impl AugSpec {
    /// No-op recipe: full crop, no flip, no jitter, no blur.
    pub fn identity(seed: u64) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter_strength: 0.0,
            blur_sigma_range: (0.0, 0.0),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("crop_scale_range", format!("need 0 < min <= max <= 1, got ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob", format!("{} not in [0, 1]", self.flip_prob)));
        }
        if !(0.0..=1.0).contains(&self.color_jitter_strength) {
            return Err(Error::invalid(
                "color_jitter_strength",
                format!("{} not in [0, 1]", self.color_jitter_strength),
            ));
        }
        let (blo, bhi) = self.blur_sigma_range;
        if !(blo >= 0.0 && blo <= bhi && bhi.is_finite()) {
            return Err(Error::invalid("blur_sigma_range", format!("need 0 <= min <= max, got ({blo}, {bhi})")));
        }
        Ok(())
    }
}

/// Two independently augmented views with the input's size.
pub fn two_views(img: &RgbImage, spec: &AugSpec) -> Result<(RgbImage, RgbImage)> {
    spec.validate()?;
    if img.width() < MIN_SIDE || img.height() < MIN_SIDE {
        return Err(Error::ImageTooSmall { width: img.width(), height: img.height(), min: MIN_SIDE });
    }
    let first = augment_once(img, spec, &mut rng::derived(spec.seed, 0xA06, 0));
    let second = augment_once(img, spec, &mut rng::derived(spec.seed, 0xA06, 1));
    Ok((first, second))
}

fn augment_once(img: &RgbImage, spec: &AugSpec, rng: &mut rng::Rng) -> RgbImage {
    let (w, h) = (img.width(), img.height());

    let (lo, hi) = spec.crop_scale_range;
    let scale = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let cw = ((w as f32 * side).round() as usize).clamp(1, w);
    let ch = ((h as f32 * side).round() as usize).clamp(1, h);
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    let mut out = if cw == w && ch == h { img.clone() } else { img.crop(x0, y0, cw, ch).resize(w, h) };

    if rng.gen::<f32>() < spec.flip_prob {
        out = out.flip_horizontal();
    }

    let s = spec.color_jitter_strength;
    if s > 0.0 {
        let brightness = rng.gen_range(1.0 - s..=1.0 + s);
        let contrast = rng.gen_range(1.0 - s..=1.0 + s);
        let saturation = rng.gen_range(1.0 - s..=1.0 + s);
        out = color_jitter(&out, brightness, contrast, saturation);
    }

    let (blo, bhi) = spec.blur_sigma_range;
    let sigma = if blo < bhi { rng.gen_range(blo..=bhi) } else { blo };
    if sigma > 0.0 {
        out = gaussian_blur(&out, sigma);
    }
    out
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &RgbImage, brightness: f32, contrast: f32, saturation: f32) -> RgbImage {
    let pixels: Vec<[f32; 3]> = img
        .data()
        .chunks_exact(3)
        .map(|p| [p[0] as f32 * brightness, p[1] as f32 * brightness, p[2] as f32 * brightness])
        .collect();
    let mean = pixels.iter().map(|&p| luma(p)).sum::<f32>() / pixels.len() as f32;
    let data = pixels
        .into_iter()
        .flat_map(|p| {
            let p = p.map(|v| (v - mean) * contrast + mean);
            let gray = luma(p);
            p.map(|v| ((v - gray) * saturation + gray).round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    RgbImage::new(img.width(), img.height(), data).expect("same size")
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(img: &RgbImage, sigma: f32) -> RgbImage {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (img.width() as isize, img.height() as isize);
    let src: Vec<f32> = img.data().iter().map(|&v| v as f32).collect();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * src[((y * w + sx) * 3) as usize + c];
                }
                tmp[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    let mut data = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[((sy * w + x) * 3) as usize + c];
                }
                data[((y * w + x) * 3) as usize + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(img.width(), img.height(), data).expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [((x * 37 + y * 11) % 256) as u8, ((x * y) % 256) as u8, ((y * 53) % 256) as u8])
    }

    #[test]
    fn identity_spec_returns_input_twice() {
        let img = textured(16, 12);
        let (a, b) = two_views(&img, &AugSpec::identity(9)).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn same_seed_same_views() {
        let img = textured(24, 24);
        let spec = AugSpec { seed: 5, ..AugSpec::default() };
        assert_eq!(two_views(&img, &spec).unwrap(), two_views(&img, &spec).unwrap());
    }

    #[test]
    fn different_seeds_differ_and_sizes_are_kept() {
        let img = textured(24, 20);
        let (a1, b1) = two_views(&img, &AugSpec { seed: 1, ..AugSpec::default() }).unwrap();
        let (a2, _) = two_views(&img, &AugSpec { seed: 2, ..AugSpec::default() }).unwrap();
        assert_ne!(a1, a2);
        for v in [&a1, &b1, &a2] {
            assert_eq!((v.width(), v.height()), (24, 20));
        }
    }

    #[test]
    fn too_small_is_rejected() {
        let img = textured(7, 16);
        let err = two_views(&img, &AugSpec::default()).unwrap_err();
        assert!(err.to_string().contains("image too small"));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let img = textured(16, 16);
        let bad = AugSpec { crop_scale_range: (0.0, 1.0), ..AugSpec::default() };
        assert!(two_views(&img, &bad).is_err());
        let bad = AugSpec { flip_prob: 1.5, ..AugSpec::default() };
        assert!(two_views(&img, &bad).is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::filled(10, 10, [40, 90, 200]);
        assert_eq!(gaussian_blur(&img, 1.2), img);
    }
}
