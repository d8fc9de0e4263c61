//! Prior and guided region maps from pixel-wise cosine correspondence.
//!
//! For every query cell the raw score is the largest cosine similarity to
//! any cell of a reference feature map; the scores are then min-max
//! normalised to `[0, 1)`.

use serde::{Deserialize, Serialize};

use crate::image::BinaryMask;
use crate::io;
use crate::nn::{parse_tensor_file, tensor_file_bytes, FeatureMap};
use crate::{Error, Result};

/// Stabiliser of the min-max normalisation.
pub const NORM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryRegion {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    #[default]
    AsIs,
    InvertedPrior,
}

/// Channel-stacked `[prior, guided]` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMaps {
    pub prior: RegionMap,
    pub guided: RegionMap,
}

#[derive(Serialize, Deserialize)]
struct MapHeader {
    kind: String,
    height: usize,
    width: usize,
}

impl RegionMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} values for a {height}x{width} map", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("values", "region map values must lie in [0, 1]"));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `1 - v` per cell.
    pub fn inverted(&self) -> Self {
        Self { height: self.height, width: self.width, values: self.values.iter().map(|v| 1.0 - v).collect() }
    }

    /// Cell-wise maximum of maps on the same grid.
    pub fn cellwise_max(maps: &[RegionMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::invalid("maps", "need at least one map"))?;
        let mut values = first.values.clone();
        for m in &maps[1..] {
            if m.grid() != first.grid() {
                return Err(Error::ShapeMismatch("maps on different grids".into()));
            }
            for (a, &b) in values.iter_mut().zip(&m.values) {
                *a = a.max(b);
            }
        }
        Ok(Self { height: first.height, width: first.width, values })
    }

    /// 8-bit grayscale PNG, `round(v * 255)`.
    pub fn to_png(&self) -> Vec<u8> {
        let data = self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        io::encode_gray_png(self.width, self.height, data)
    }

    pub fn to_tensor_bytes(&self) -> Vec<u8> {
        let header = MapHeader { kind: "region_map".into(), height: self.height, width: self.width };
        tensor_file_bytes(&serde_json::to_vec(&header).expect("header serialises"), &self.values)
    }

    pub fn from_tensor_bytes(bytes: &[u8]) -> Result<Self> {
        let path = std::path::Path::new("<region map>");
        let file = parse_tensor_file(bytes, path)?;
        let header: MapHeader = serde_json::from_slice(&file.header)?;
        if header.kind != "region_map" {
            return Err(Error::Format { path: path.into(), reason: format!("unexpected kind {}", header.kind) });
        }
        Self::new(header.height, header.width, file.data)
    }
}

impl BinaryRegion {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return Err(Error::ShapeMismatch(format!("bad binary region for {height}x{width}")));
        }
        Ok(Self { height, width, data })
    }

    /// Region from a mask resampled to `height x width` by nearest neighbour.
    pub fn from_mask(mask: &BinaryMask, height: usize, width: usize) -> Self {
        let m = if mask.width() == width && mask.height() == height {
            mask.clone()
        } else {
            mask.resize_nearest(width, height)
        };
        Self { height, width, data: m.data().to_vec() }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// `x·p / (|x| |p|)`, and 0 when either vector is zero.
pub fn cosine(x: &[f32], p: &[f32]) -> f64 {
    let dot: f64 = x.iter().zip(p).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nx = norm(x);
    let np = norm(p);
    if nx == 0.0 || np == 0.0 {
        0.0
    } else {
        dot / (nx * np)
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt()
}

/// `(v - min) / (max - min + eps)` with `eps = 1e-7`.
pub fn normalize_map(height: usize, width: usize, raw: &[f64]) -> Result<RegionMap> {
    if raw.len() != height * width || raw.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} raw values for a {height}x{width} map", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("raw", "values must be finite"));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = max - min + NORM_EPS;
    let values = raw.iter().map(|&v| ((v - min) / denom) as f32).collect();
    Ok(RegionMap { height, width, values })
}

/// Raw max-cosine scores of every query cell against all reference cells.
fn max_cosine(query: &FeatureMap<f32>, reference: &FeatureMap<f32>, scale: Option<&[u8]>) -> Vec<f64> {
    let zero = vec![0.0f32; reference.channels()];
    let refs: Vec<&[f32]> = (0..reference.cells())
        .map(|j| match scale {
            Some(mask) if mask[j] == 0 => zero.as_slice(),
            _ => reference.cell(j),
        })
        .collect();
    (0..query.cells())
        .map(|i| {
            let x = query.cell(i);
            refs.iter().map(|p| cosine(x, p)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn check_channels(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> Result<()> {
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!("{} vs {} feature channels", a.channels(), b.channels())));
    }
    if a.cells() == 0 || b.cells() == 0 {
        return Err(Error::ShapeMismatch("empty feature map".into()));
    }
    Ok(())
}

/// Self-correspondence between bridge features and prior features of the
/// same query image.
pub fn prior_region_map(xq: &FeatureMap<f32>, pq: &FeatureMap<f32>) -> Result<RegionMap> {
    if (xq.height(), xq.width()) != (pq.height(), pq.width()) {
        return Err(Error::ShapeMismatch(format!(
            "bridge grid {}x{} vs prior grid {}x{}",
            xq.height(),
            xq.width(),
            pq.height(),
            pq.width()
        )));
    }
    check_channels(xq, pq)?;
    normalize_map(xq.height(), xq.width(), &max_cosine(xq, pq, None))
}

/// Cross-correspondence between bridge features and mask-filtered support
/// features. The mask is resampled to the support grid.
pub fn guided_region_map(xq: &FeatureMap<f32>, xs: &FeatureMap<f32>, ms: &BinaryMask) -> Result<RegionMap> {
    check_channels(xq, xs)?;
    let region = BinaryRegion::from_mask(ms, xs.height(), xs.width());
    if region.count_ones() == 0 {
        return Err(Error::EmptySupportMask);
    }
    normalize_map(xq.height(), xq.width(), &max_cosine(xq, xs, Some(region.data())))
}

/// Cells strictly above `alpha`.
pub fn threshold_region(map: &RegionMap, alpha: f32) -> BinaryRegion {
    BinaryRegion {
        height: map.height,
        width: map.width,
        data: map.values.iter().map(|&v| (v > alpha) as u8).collect(),
    }
}

pub fn fuse_maps(prior: &RegionMap, guided: &RegionMap, polarity: Polarity) -> Result<FusedMaps> {
    if prior.grid() != guided.grid() {
        return Err(Error::ShapeMismatch(format!("prior grid {:?} vs guided grid {:?}", prior.grid(), guided.grid())));
    }
    let prior = match polarity {
        Polarity::AsIs => prior.clone(),
        Polarity::InvertedPrior => prior.inverted(),
    };
    Ok(FusedMaps { prior, guided: guided.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(h: usize, w: usize, cells: &[&[f32]]) -> FeatureMap<f32> {
        FeatureMap::from_cells(h, w, &cells.iter().map(|c| c.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[2.0, 1.0]), 0.0);
    }

    #[test]
    fn normalisation_cases() {
        let m = normalize_map(1, 3, &[0.2, 0.6, 1.0]).unwrap();
        assert_eq!(m.values()[0], 0.0);
        assert_eq!(m.values()[1], ((0.6f64 - 0.2) / (0.8 + 1e-7)) as f32);
        assert_eq!(m.values()[2], ((1.0f64 - 0.2) / (0.8 + 1e-7)) as f32);
        assert!(m.values()[2] < 1.0);
        let c = normalize_map(2, 2, &[0.3; 4]).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_match_saturates_prior_map() {
        let x = fm(2, 2, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[2.0, 0.5]]);
        let m = prior_region_map(&x, &x).unwrap();
        // Every cell finds itself, so the raw map is flat up to rounding.
        assert!(m.values().iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn two_cell_table() {
        let xq = fm(2, 1, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let pq = fm(2, 1, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let m = prior_region_map(&xq, &pq).unwrap();
        assert!((m.values()[0] - 1.0).abs() < 1e-6);
        assert_eq!(m.values()[1], 0.0);
    }

    #[test]
    fn guided_map_masks_support() {
        let xq = fm(1, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let xs = fm(1, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let only_first = BinaryMask::from_fn(2, 1, |x, _| x == 0);
        let m = guided_region_map(&xq, &xs, &only_first).unwrap();
        // Query cell 0 matches the kept support cell exactly; cell 1 only sees zeros.
        assert!(m.values()[0] > 0.99);
        assert_eq!(m.values()[1], 0.0);

        let all = BinaryMask::from_fn(2, 1, |_, _| true);
        assert_eq!(guided_region_map(&xq, &xs, &all).unwrap(), prior_region_map(&xq, &xs).unwrap());
        let none = BinaryMask::zeros(2, 1);
        assert!(matches!(guided_region_map(&xq, &xs, &none), Err(Error::EmptySupportMask)));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = FeatureMap::<f32>::zeros(2, 2, 3);
        let b = FeatureMap::<f32>::zeros(2, 3, 3);
        assert!(prior_region_map(&a, &b).is_err());
        let c = FeatureMap::<f32>::zeros(2, 2, 4);
        assert!(prior_region_map(&a, &c).is_err());
    }

    #[test]
    fn thresholding_is_strict() {
        let m = RegionMap::new(1, 4, vec![0.7, 0.5, 0.0, 0.2]).unwrap();
        assert_eq!(threshold_region(&m, 0.5).data(), &[1, 0, 0, 0]);
        assert_eq!(threshold_region(&m, 0.0).data(), &[1, 1, 0, 1]);
    }

    #[test]
    fn fusion_polarity() {
        let p = RegionMap::new(1, 2, vec![0.0, 0.0]).unwrap();
        let g = RegionMap::new(1, 2, vec![0.3, 0.9]).unwrap();
        let as_is = fuse_maps(&p, &g, Polarity::AsIs).unwrap();
        assert_eq!((as_is.prior.clone(), as_is.guided.clone()), (p.clone(), g.clone()));
        let inv = fuse_maps(&p, &g, Polarity::InvertedPrior).unwrap();
        assert_eq!(inv.prior.values(), &[1.0, 1.0]);
        assert_eq!(inv.prior.inverted(), p);
        let other = RegionMap::new(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(fuse_maps(&p, &other, Polarity::AsIs).is_err());
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let m = normalize_map(2, 3, &[0.1, 0.7, 0.33, 0.9, 0.25, 0.61]).unwrap();
        assert_eq!(RegionMap::from_tensor_bytes(&m.to_tensor_bytes()).unwrap(), m);
        assert!(!m.to_png().is_empty());
    }
}
