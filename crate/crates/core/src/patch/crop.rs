use super::PatchSegmentation;
use crate::image::{BinaryMask, RgbImage};
use crate::{Error, Result};

/// Tight bounding-box crop of one patch, resized to a square.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchCrop {
    pub patch_id: u32,
    /// `(x, y, width, height)` in source-image pixels.
    pub bbox: (usize, usize, usize, usize),
    /// Patch pixels inside the box.
    pub mask: BinaryMask,
    pub area: usize,
    pub image: RgbImage,
}

/// One crop per patch whose area is at least `min_area`, in patch-id order.
pub fn extract_patches(
    img: &RgbImage,
    seg: &PatchSegmentation,
    min_area: usize,
    out_size: usize,
) -> Result<Vec<PatchCrop>> {
    if img.width() != seg.width() || img.height() != seg.height() {
        return Err(Error::ShapeMismatch(format!(
            "segmentation {}x{} for image {}x{}",
            seg.width(),
            seg.height(),
            img.width(),
            img.height()
        )));
    }
    if out_size == 0 {
        return Err(Error::invalid("out_size", "must be positive"));
    }
    let count = seg.patch_count();
    let mut lo = vec![(usize::MAX, usize::MAX); count];
    let mut hi = vec![(0usize, 0usize); count];
    let areas = seg.areas();
    for y in 0..seg.height() {
        for x in 0..seg.width() {
            let l = seg.label(x, y) as usize;
            lo[l] = (lo[l].0.min(x), lo[l].1.min(y));
            hi[l] = (hi[l].0.max(x), hi[l].1.max(y));
        }
    }
    Ok((0..count)
        .filter(|&l| areas[l] >= min_area)
        .map(|l| {
            let (x0, y0) = lo[l];
            let (w, h) = (hi[l].0 - x0 + 1, hi[l].1 - y0 + 1);
            let mask = BinaryMask::from_fn(w, h, |x, y| seg.label(x0 + x, y0 + y) as usize == l);
            PatchCrop {
                patch_id: l as u32,
                bbox: (x0, y0, w, h),
                mask,
                area: areas[l],
                image: img.crop(x0, y0, w, h).resize(out_size, out_size),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadrants(size: usize) -> PatchSegmentation {
        let half = size / 2;
        let labels: Vec<u32> =
            (0..size * size).map(|p| ((p / size >= half) as u32) * 2 + (p % size >= half) as u32).collect();
        PatchSegmentation::from_labels(size, size, &labels).unwrap()
    }

    #[test]
    fn whole_image_patch_is_resized_image() {
        let img = RgbImage::from_fn(16, 16, |x, y| [x as u8 * 10, y as u8 * 10, 0]);
        let seg = PatchSegmentation::from_labels(16, 16, &vec![0; 256]).unwrap();
        let crops = extract_patches(&img, &seg, 1, 8).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].image, img.resize(8, 8));
        assert_eq!(crops[0].bbox, (0, 0, 16, 16));
    }

    #[test]
    fn quadrants_give_four_half_size_boxes() {
        let img = RgbImage::filled(64, 64, [1, 2, 3]);
        let crops = extract_patches(&img, &quadrants(64), 0, 32).unwrap();
        assert_eq!(crops.len(), 4);
        for c in &crops {
            assert_eq!((c.bbox.2, c.bbox.3), (32, 32));
            assert_eq!(c.area, 1024);
            assert_eq!((c.image.width(), c.image.height()), (32, 32));
        }
    }

    #[test]
    fn min_area_filter_can_empty_the_list() {
        let img = RgbImage::filled(8, 8, [0, 0, 0]);
        assert!(extract_patches(&img, &quadrants(8), 17, 4).unwrap().is_empty());
    }

    #[test]
    fn boxes_contain_their_patch_pixels() {
        let img = RgbImage::filled(12, 12, [0, 0, 0]);
        let labels: Vec<u32> = (0..144).map(|p| ((p % 12) * (p / 12) % 5) as u32).collect();
        let seg = PatchSegmentation::from_labels(12, 12, &labels).unwrap();
        let crops = extract_patches(&img, &seg, 0, 4).unwrap();
        for c in &crops {
            let (x0, y0, w, h) = c.bbox;
            let mut inside = 0;
            for y in 0..12 {
                for x in 0..12 {
                    if seg.label(x, y) == c.patch_id {
                        assert!(x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
                        assert!(c.mask.get(x - x0, y - y0));
                        inside += 1;
                    }
                }
            }
            assert_eq!(inside, c.mask.count_ones());
        }
    }
}
