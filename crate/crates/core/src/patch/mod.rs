//! Local patch generation.
//!
//! Two segmenters produce a [`PatchSegmentation`]: SLIC clustering over
//! `labxy` and Felzenszwalb's graph-based merging. [`extract_patches`] turns a
//! segmentation into resized crops.

mod crop;
mod felz;
mod slic;

pub use crop::{extract_patches, PatchCrop};
pub use felz::{felz_segment, EdgeWeight, FelzParams};
pub use slic::{gradient_map, slic_segment, slic_segment_traced, SlicParams, SlicTrace};

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io;
use crate::{Error, Result};

/// Total labelling of an image into patches `0..patch_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSegmentation {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    patch_count: usize,
}

/// JSON sidecar written next to the 16-bit label PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationHeader {
    pub width: usize,
    pub height: usize,
    pub patch_count: usize,
    pub params: serde_json::Value,
}

impl PatchSegmentation {
    /// Builds a segmentation from arbitrary labels, renumbering them in
    /// raster order of first appearance.
    pub fn from_labels(width: usize, height: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} labels for {width}x{height}", raw.len())));
        }
        let mut remap = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                let next = remap.len() as u32;
                *remap.entry(l).or_insert(next)
            })
            .collect();
        Ok(Self { width, height, labels, patch_count: remap.len() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.patch_count];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    /// True when every patch forms a single 4-connected region.
    pub fn is_connected(&self) -> bool {
        let signed: Vec<i64> = self.labels.iter().map(|&l| l as i64).collect();
        let comps = Components::label4(self.width, self.height, &signed);
        comps.count() == self.patch_count
    }

    /// Encodes as a 16-bit grayscale PNG of label ids.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        if self.patch_count > u16::MAX as usize + 1 {
            return Err(Error::invalid("patch_count", "too many patches for a 16-bit label map"));
        }
        Ok(io::encode_gray16_png(self.width, self.height, self.labels.iter().map(|&l| l as u16).collect()))
    }

    pub fn header(&self, params: serde_json::Value) -> SegmentationHeader {
        SegmentationHeader { width: self.width, height: self.height, patch_count: self.patch_count, params }
    }

    /// Writes `<stem>.png` and `<stem>.json` atomically.
    pub fn save(&self, dir: &Path, stem: &str, params: serde_json::Value) -> Result<()> {
        let png = self.to_png()?;
        let json = serde_json::to_vec_pretty(&self.header(params))?;
        io::write_atomic(&dir.join(format!("{stem}.png")), &png)?;
        io::write_atomic(&dir.join(format!("{stem}.json")), &json)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, SegmentationHeader)> {
        let json_path = dir.join(format!("{stem}.json"));
        let bytes = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: SegmentationHeader = serde_json::from_slice(&bytes)?;
        let (w, h, raw) = io::read_gray16_png(&dir.join(format!("{stem}.png")))?;
        let labels: Vec<u32> = raw.into_iter().map(u32::from).collect();
        let seg = Self::from_labels(w, h, &labels)?;
        if seg.patch_count != header.patch_count || seg.width != header.width || seg.height != header.height {
            return Err(Error::Format { path: json_path, reason: "header disagrees with label map".into() });
        }
        Ok((seg, header))
    }
}

/// 4-connected components of a label grid.
pub(crate) struct Components {
    pub id: Vec<usize>,
    pub size: Vec<usize>,
    pub label: Vec<i64>,
}

impl Components {
    pub fn label4(width: usize, height: usize, labels: &[i64]) -> Self {
        let n = width * height;
        let mut id = vec![usize::MAX; n];
        let mut size = Vec::new();
        let mut label = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n {
            if id[start] != usize::MAX {
                continue;
            }
            let comp = size.len();
            let l = labels[start];
            id[start] = comp;
            queue.push_back(start);
            let mut count = 0;
            while let Some(p) = queue.pop_front() {
                count += 1;
                for q in neighbors4(p, width, height) {
                    if id[q] == usize::MAX && labels[q] == l {
                        id[q] = comp;
                        queue.push_back(q);
                    }
                }
            }
            size.push(count);
            label.push(l);
        }
        Self { id, size, label }
    }

    pub fn count(&self) -> usize {
        self.size.len()
    }
}

#[inline]
pub(crate) fn neighbors4(p: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % width, p / width);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < width).then(|| p + 1);
    let up = (y > 0).then(|| p - width);
    let down = (y + 1 < height).then(|| p + width);
    [left, right, up, down].into_iter().flatten()
}
