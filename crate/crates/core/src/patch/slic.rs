//! Simple linear iterative clustering over `labxy`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Components, PatchSegmentation};
use crate::image::LabImage;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicParams {
    pub k_clusters: usize,
    /// Weight `m` of the spatial term.
    pub compactness: f32,
    /// Stop once the summed centre displacement drops to this value.
    pub residual_threshold: f32,
    pub max_iterations: usize,
    /// Side of the lowest-gradient search window used to re-seed centres.
    pub recenter_window: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self { k_clusters: 4, compactness: 10.0, residual_threshold: 1.0, max_iterations: 10, recenter_window: 3 }
    }
}

impl SlicParams {
    /// Chooses `K` so that the mean cluster covers roughly `patch_area` pixels.
    pub fn for_patch_area(width: usize, height: usize, patch_area: usize) -> Self {
        let k = ((width * height) as f64 / patch_area.max(1) as f64).round().max(1.0) as usize;
        Self { k_clusters: k, ..Self::default() }
    }

    fn validate(&self, pixels: usize) -> Result<()> {
        if self.k_clusters == 0 || self.k_clusters > pixels {
            return Err(Error::invalid("k_clusters", format!("{} not in [1, {pixels}]", self.k_clusters)));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(Error::invalid("compactness", format!("{} must be positive", self.compactness)));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.recenter_window % 2 == 0 {
            return Err(Error::invalid("recenter_window", "must be odd"));
        }
        Ok(())
    }
}

/// Diagnostics of one clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicTrace {
    pub grid_interval: f64,
    pub iterations: usize,
    /// Residual `E` after each iteration.
    pub residuals: Vec<f64>,
    /// Pixel count of the orphan and fragment pixels reassigned by the connectivity pass.
    pub reassigned_pixels: usize,
}

/// Squared Lab differences of the ±1 neighbours; border pixels are `+inf`.
pub fn gradient_map(img: &LabImage) -> Result<Vec<f32>> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall { width: w, height: h, min: 3 });
    }
    let mut grad = vec![f32::INFINITY; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let horizontal = sq_dist(img.pixel(x + 1, y), img.pixel(x - 1, y));
            let vertical = sq_dist(img.pixel(x, y + 1), img.pixel(x, y - 1));
            grad[y * w + x] = horizontal + vertical;
        }
    }
    Ok(grad)
}

fn sq_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Cluster centre in `labxy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Center {
    pub lab: [f64; 3],
    pub x: f64,
    pub y: f64,
}

impl Center {
    fn displacement(&self, other: &Center) -> f64 {
        let dl: f64 = (0..3).map(|c| (self.lab[c] - other.lab[c]).powi(2)).sum();
        (dl + (self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// `D_lab + D_xy / S * m`.
#[inline]
pub(crate) fn slic_distance(center: &Center, lab: [f32; 3], x: usize, y: usize, interval: f64, m: f64) -> f64 {
    let d_lab = (0..3).map(|c| (center.lab[c] - lab[c] as f64).powi(2)).sum::<f64>().sqrt();
    let d_xy = ((center.x - x as f64).powi(2) + (center.y - y as f64).powi(2)).sqrt();
    d_lab + d_xy / interval * m
}

/// Pixel range covered by a centre's `2S x 2S` search window along one axis.
fn window(c: f64, interval: f64, len: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (c - interval).ceil().max(0.0) as usize;
    let hi = ((c + interval).floor().max(0.0) as usize).min(len - 1);
    lo..=hi
}

pub(crate) fn grid_centers(img: &LabImage, k: usize) -> Vec<Center> {
    let (w, h) = (img.width(), img.height());
    let ny = ((k as f64 * h as f64 / w as f64).sqrt().floor() as usize).clamp(1, h.min(k));
    let nx = (k / ny).clamp(1, w);
    let step_x = w as f64 / nx as f64;
    let step_y = h as f64 / ny as f64;
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * step_x - 0.5;
            let y = (j as f64 + 0.5) * step_y - 0.5;
            centers.push(Center { lab: [0.0; 3], x, y });
        }
    }
    centers
}

/// Moves each centre to the strictly lowest-gradient pixel in its window;
/// a centre whose own pixel is already minimal stays where it is.
pub(crate) fn recenter(img: &LabImage, centers: &mut [Center], window_side: usize) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let grad = if w >= 3 && h >= 3 { Some(gradient_map(img)?) } else { None };
    let r = (window_side / 2) as isize;
    for c in centers.iter_mut() {
        let px = (c.x.round() as isize).clamp(0, w as isize - 1);
        let py = (c.y.round() as isize).clamp(0, h as isize - 1);
        if let Some(grad) = &grad {
            let mut best = grad[py as usize * w + px as usize];
            let mut best_pos = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (px + dx, py + dy);
                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                        continue;
                    }
                    let g = grad[qy as usize * w + qx as usize];
                    if g < best {
                        best = g;
                        best_pos = Some((qx, qy));
                    }
                }
            }
            if let Some((qx, qy)) = best_pos {
                c.x = qx as f64;
                c.y = qy as f64;
            }
        }
        let lab = img.pixel(c.x.round() as usize, c.y.round() as usize);
        c.lab = lab.map(f64::from);
    }
    Ok(())
}

/// Nearest centre for each pixel among the centres whose window covers it;
/// `-1` when no window does.
pub(crate) fn assign(img: &LabImage, centers: &[Center], interval: f64, m: f64) -> Vec<i64> {
    let (w, h) = (img.width(), img.height());
    let mut best = vec![f64::INFINITY; w * h];
    let mut labels = vec![-1i64; w * h];
    for (k, c) in centers.iter().enumerate() {
        for y in window(c.y, interval, h) {
            for x in window(c.x, interval, w) {
                let p = y * w + x;
                let d = slic_distance(c, img.pixel(x, y), x, y, interval, m);
                if d < best[p] {
                    best[p] = d;
                    labels[p] = k as i64;
                }
            }
        }
    }
    labels
}

fn update_centers(img: &LabImage, labels: &[i64], centers: &[Center]) -> Vec<Center> {
    let w = img.width();
    let mut sums = vec![[0.0f64; 6]; centers.len()];
    for (p, &l) in labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let lab = img.pixel(p % w, p / w);
        let s = &mut sums[l as usize];
        for c in 0..3 {
            s[c] += lab[c] as f64;
        }
        s[3] += (p % w) as f64;
        s[4] += (p / w) as f64;
        s[5] += 1.0;
    }
    centers
        .iter()
        .zip(&sums)
        .map(|(old, s)| {
            if s[5] == 0.0 {
                *old
            } else {
                let n = s[5];
                Center { lab: [s[0] / n, s[1] / n, s[2] / n], x: s[3] / n, y: s[4] / n }
            }
        })
        .collect()
}

/// Keeps the largest fragment of every cluster and merges all other
/// fragments and orphans into the largest adjacent kept cluster.
pub(crate) fn enforce_connectivity(width: usize, height: usize, labels: &[i64]) -> (Vec<u32>, usize) {
    let comps = Components::label4(width, height, labels);
    let count = comps.count();

    let mut adjacency = vec![BTreeSet::new(); count];
    for y in 0..height {
        for x in 0..width {
            let a = comps.id[y * width + x];
            if x + 1 < width {
                let b = comps.id[y * width + x + 1];
                if a != b {
                    adjacency[a].insert(b);
                    adjacency[b].insert(a);
                }
            }
            if y + 1 < height {
                let b = comps.id[(y + 1) * width + x];
                if a != b {
                    adjacency[a].insert(b);
                    adjacency[b].insert(a);
                }
            }
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; count];
    let mut largest: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
    for c in 0..count {
        let l = comps.label[c];
        if l < 0 {
            continue;
        }
        match largest.get(&l) {
            Some(&cur) if comps.size[cur] >= comps.size[c] => {}
            _ => {
                largest.insert(l, c);
            }
        }
    }
    let mut cluster_size = vec![0usize; count];
    for &c in largest.values() {
        owner[c] = Some(c);
        cluster_size[c] = comps.size[c];
    }
    assert!(!largest.is_empty(), "slic: no pixel was assigned to any centre");

    let mut reassigned = 0;
    loop {
        let mut pending = false;
        for c in 0..count {
            if owner[c].is_some() {
                continue;
            }
            let target = adjacency[c]
                .iter()
                .filter_map(|&n| owner[n])
                .max_by(|&a, &b| cluster_size[a].cmp(&cluster_size[b]).then(b.cmp(&a)));
            match target {
                Some(t) => {
                    owner[c] = Some(t);
                    cluster_size[t] += comps.size[c];
                    reassigned += comps.size[c];
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
    }
    let out = comps.id.iter().map(|&c| owner[c].expect("all fragments owned") as u32).collect();
    (out, reassigned)
}

pub fn slic_segment(img: &LabImage, params: &SlicParams) -> Result<PatchSegmentation> {
    slic_segment_traced(img, params).map(|(seg, _)| seg)
}

pub fn slic_segment_traced(img: &LabImage, params: &SlicParams) -> Result<(PatchSegmentation, SlicTrace)> {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    params.validate(n)?;
    let interval = (n as f64 / params.k_clusters as f64).sqrt();
    let m = params.compactness as f64;

    let mut centers = grid_centers(img, params.k_clusters);
    recenter(img, &mut centers, params.recenter_window)?;

    let mut residuals = Vec::new();
    let mut labels;
    loop {
        labels = assign(img, &centers, interval, m);
        let updated = update_centers(img, &labels, &centers);
        let residual: f64 = centers.iter().zip(&updated).map(|(a, b)| a.displacement(b)).sum();
        centers = updated;
        residuals.push(residual);
        if residual <= params.residual_threshold as f64 || residuals.len() >= params.max_iterations {
            break;
        }
    }

    let (merged, reassigned_pixels) = enforce_connectivity(w, h, &labels);
    let seg = PatchSegmentation::from_labels(w, h, &merged)?;
    let trace = SlicTrace { grid_interval: interval, iterations: residuals.len(), residuals, reassigned_pixels };
    Ok((seg, trace))
}
