use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::BinaryMask;
use crate::io::write_atomic;
use crate::nn::{parse_tensor_file, read_tensor_file, tensor_file_bytes, ConvSpec, ConvStack, Embedding, FeatureMap, Real, StackCache};
use crate::regionmap::{BinaryRegion, FusedMaps};
use crate::rng;
use crate::{Error, Result};

/// Mean of the support feature vectors over foreground cells of the mask
/// resampled to the feature grid.
pub fn masked_pool<T: Real>(xs: &FeatureMap<T>, ms: &BinaryMask) -> Result<Embedding<T>> {
    let region = BinaryRegion::from_mask(ms, xs.height(), xs.width());
    masked_pool_region(xs, &region)
}

pub(crate) fn masked_pool_region<T: Real>(xs: &FeatureMap<T>, region: &BinaryRegion) -> Result<Embedding<T>> {
    let n = region.count_ones();
    if n == 0 {
        return Err(Error::EmptySupportMask);
    }
    let mut acc = vec![T::zero(); xs.channels()];
    for (i, &m) in region.data().iter().enumerate() {
        if m == 1 {
            for (a, &v) in acc.iter_mut().zip(xs.cell(i)) {
                *a += v;
            }
        }
    }
    let n = T::from_usize(n).expect("count");
    Ok(Embedding::raw(acc.into_iter().map(|v| v / n).collect()))
}

/// Gradient of [`masked_pool_region`] with respect to the pooled features.
pub(crate) fn masked_pool_backward<T: Real>(
    shape: (usize, usize, usize),
    region: &BinaryRegion,
    d_guider: &[T],
) -> FeatureMap<T> {
    let (h, w, c) = shape;
    let mut out = FeatureMap::zeros(h, w, c);
    let n = T::from_usize(region.count_ones().max(1)).expect("count");
    for (i, &m) in region.data().iter().enumerate() {
        if m == 1 {
            for (o, &g) in out.cell_mut(i).iter_mut().zip(d_guider) {
                *o = g / n;
            }
        }
    }
    out
}

/// Decoder input: `[features, guider, prior, guided]` per cell, then
/// conv3x3+ReLU, conv3x3+ReLU, conv1x1 to two logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderArch {
    pub feature_channels: usize,
    pub hidden: usize,
}

impl DecoderArch {
    pub fn new(feature_channels: usize, hidden: usize) -> Self {
        Self { feature_channels, hidden }
    }

    pub fn input_channels(&self) -> usize {
        2 * self.feature_channels + 2
    }

    pub fn layers(&self) -> Vec<ConvSpec> {
        vec![
            ConvSpec::conv3(self.input_channels(), self.hidden, 1),
            ConvSpec::conv3(self.hidden, self.hidden, 1),
            ConvSpec { in_channels: self.hidden, out_channels: 2, kernel: 1, stride: 1, relu: false },
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(ConvSpec::param_count).sum()
    }

    fn stack(&self) -> Result<ConvStack> {
        if self.feature_channels == 0 || self.hidden == 0 {
            return Err(Error::invalid("decoder", "channel counts must be positive"));
        }
        ConvStack::new(self.layers())
    }
}

pub struct DecoderCache<T> {
    stack: StackCache<T>,
    channels: usize,
}

/// Gradients of one decoder backward pass.
#[derive(Debug, Clone)]
pub struct DecoderGrads<T> {
    pub params: Vec<T>,
    pub features: FeatureMap<T>,
    pub guider: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T = f32> {
    arch: DecoderArch,
    stack: ConvStack,
    params: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderHeader {
    kind: String,
    arch: DecoderArch,
}

impl<T: Real> Decoder<T> {
    pub fn zeros(arch: DecoderArch) -> Result<Self> {
        let stack = arch.stack()?;
        Ok(Self { arch, stack, params: vec![T::zero(); arch.param_count()] })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: DecoderArch, seed: u64) -> Result<Self> {
        let mut dec = Self::zeros(arch)?;
        let mut rng = rng::derived(seed, 0xDEC, 0);
        for i in 0..dec.stack.specs().len() {
            let spec = dec.stack.specs()[i];
            let fan_in = (spec.kernel * spec.kernel * spec.in_channels) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let (wr, _) = dec.stack.layer_ranges(i);
            for w in &mut dec.params[wr] {
                *w = T::lit(normal.sample(&mut rng));
            }
        }
        Ok(dec)
    }

    pub fn from_params(arch: DecoderArch, params: Vec<T>) -> Result<Self> {
        let stack = arch.stack()?;
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a decoder with {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, stack, params })
    }

    pub fn arch(&self) -> DecoderArch {
        self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder {
            arch: self.arch,
            stack: self.stack.clone(),
            params: self.params.iter().map(|v| U::lit(v.to_f64().expect("finite"))).collect(),
        }
    }

    fn assemble(&self, xq: &FeatureMap<T>, maps: &FusedMaps, guider: &[T]) -> Result<FeatureMap<T>> {
        let c = self.arch.feature_channels;
        if xq.channels() != c || guider.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {c} feature channels, got features {} and guider {}",
                xq.channels(),
                guider.len()
            )));
        }
        let grid = (xq.height(), xq.width());
        if maps.prior.grid() != grid || maps.guided.grid() != grid {
            return Err(Error::ShapeMismatch(format!(
                "feature grid {grid:?} vs map grids {:?}/{:?}",
                maps.prior.grid(),
                maps.guided.grid()
            )));
        }
        let mut data = Vec::with_capacity(xq.cells() * self.arch.input_channels());
        for i in 0..xq.cells() {
            data.extend_from_slice(xq.cell(i));
            data.extend_from_slice(guider);
            data.push(T::lit(maps.prior.values()[i] as f64));
            data.push(T::lit(maps.guided.values()[i] as f64));
        }
        FeatureMap::new(grid.0, grid.1, self.arch.input_channels(), data)
    }

    /// `h x w x 2` logits (channel 0 background, 1 foreground).
    pub fn forward(&self, xq: &FeatureMap<T>, maps: &FusedMaps, guider: &[T]) -> Result<FeatureMap<T>> {
        self.forward_cached(xq, maps, guider).map(|(l, _)| l)
    }

    pub fn forward_cached(
        &self,
        xq: &FeatureMap<T>,
        maps: &FusedMaps,
        guider: &[T],
    ) -> Result<(FeatureMap<T>, DecoderCache<T>)> {
        let input = self.assemble(xq, maps, guider)?;
        let (logits, stack) = self.stack.forward(&self.params, &input)?;
        Ok((logits, DecoderCache { stack, channels: self.arch.feature_channels }))
    }

    /// The region maps are treated as constants.
    pub fn backward(&self, cache: &DecoderCache<T>, d_logits: &FeatureMap<T>) -> Result<DecoderGrads<T>> {
        let mut params = vec![T::zero(); self.params.len()];
        let d_in = self
            .stack
            .backward(&self.params, &cache.stack, d_logits, &mut params, true)?
            .expect("input gradient requested");
        let c = cache.channels;
        let mut features = FeatureMap::zeros(d_in.height(), d_in.width(), c);
        let mut guider = vec![T::zero(); c];
        for i in 0..d_in.cells() {
            let cell = d_in.cell(i);
            features.cell_mut(i).copy_from_slice(&cell[..c]);
            for (g, &d) in guider.iter_mut().zip(&cell[c..2 * c]) {
                *g += d;
            }
        }
        Ok(DecoderGrads { params, features, guider })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = DecoderHeader { kind: "decoder".into(), arch: self.arch };
        let data: Vec<f32> = self.params.iter().map(|v| v.to_f32().expect("finite")).collect();
        tensor_file_bytes(&serde_json::to_vec(&header).expect("header serialises"), &data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        Self::from_tensor_file(parse_tensor_file(bytes, path)?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(read_tensor_file(path)?, path)
    }

    fn from_tensor_file(file: crate::nn::TensorFile, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let header: DecoderHeader = serde_json::from_slice(&file.header).map_err(|e| bad(format!("header: {e}")))?;
        if header.kind != "decoder" {
            return Err(bad(format!("expected a decoder checkpoint, found {}", header.kind)));
        }
        let params = file.data.iter().map(|&v| T::lit(v as f64)).collect();
        Self::from_params(header.arch, params).map_err(|e| bad(e.to_string()))
    }
}

/// Mean per-cell two-class softmax cross-entropy and its gradient.
pub fn cross_entropy<T: Real>(logits: &FeatureMap<T>, gt: &BinaryRegion) -> Result<(T, FeatureMap<T>)> {
    if logits.channels() != 2 || gt.grid() != (logits.height(), logits.width()) {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs ground truth grid {:?}",
            logits.shape(),
            gt.grid()
        )));
    }
    let n = T::from_usize(logits.cells()).expect("count");
    let mut grad = FeatureMap::zeros(logits.height(), logits.width(), 2);
    let mut total = T::zero();
    for (i, &label) in gt.data().iter().enumerate() {
        let l = logits.cell(i);
        let m = l[0].max(l[1]);
        let e0 = (l[0] - m).exp();
        let e1 = (l[1] - m).exp();
        let lse = m + (e0 + e1).ln();
        let y = label as usize;
        total += lse - l[y];
        let g = grad.cell_mut(i);
        g[0] = e0 / (e0 + e1) / n;
        g[1] = e1 / (e0 + e1) / n;
        g[y] = g[y] - T::one() / n;
    }
    Ok((total / n, grad))
}

/// Foreground wherever the foreground logit is strictly larger.
pub fn predict<T: Real>(logits: &FeatureMap<T>) -> BinaryRegion {
    let data = (0..logits.cells()).map(|i| (logits.cell(i)[1] > logits.cell(i)[0]) as u8).collect();
    BinaryRegion::new(logits.height(), logits.width(), data).expect("binary cells")
}
