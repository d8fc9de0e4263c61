use serde::{Deserialize, Serialize};

use super::{FeatureMap, Real};
use crate::{Error, Result};

/// One convolution (`kernel` 1 or 3, zero "same" padding) with optional ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn conv3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel: 3, stride, relu: true }
    }

    pub fn weight_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = 2 * self.pad();
        ((h + p - self.kernel) / self.stride + 1, (w + p - self.kernel) / self.stride + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::invalid("kernel", format!("{} is not 1 or 3", self.kernel)));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conv", "stride and channel counts must be positive"));
        }
        Ok(())
    }
}

struct LayerCache<T> {
    in_shape: (usize, usize, usize),
    cols: Vec<T>,
    /// Post-activation output; its sign gives the ReLU derivative.
    out: Vec<T>,
}

/// Saved activations of one forward pass.
pub struct StackCache<T> {
    layers: Vec<LayerCache<T>>,
}

/// A chain of convolutions sharing one flat parameter slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStack {
    specs: Vec<ConvSpec>,
    offsets: Vec<usize>,
    param_count: usize,
}

fn im2col<T: Real>(spec: &ConvSpec, input: &FeatureMap<T>, out_h: usize, out_w: usize) -> Vec<T> {
    let (h, w, c) = input.shape();
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let patch = spec.patch_len();
    let mut cols = vec![T::zero(); out_h * out_w * patch];
    let src = input.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * patch..][..patch];
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * c;
                    row[(ky * k + kx) * c..][..c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(spec: &ConvSpec, dcols: &[T], in_shape: (usize, usize, usize), out_h: usize, out_w: usize) -> Vec<T> {
    let (h, w, c) = in_shape;
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let patch = spec.patch_len();
    let mut dinput = vec![T::zero(); h * w * c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &dcols[(oy * out_w + ox) * patch..][..patch];
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    for (acc, &g) in dinput[d..d + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *acc += g;
                    }
                }
            }
        }
    }
    dinput
}

impl ConvStack {
    pub fn new(specs: Vec<ConvSpec>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if i > 0 && specs[i - 1].out_channels != s.in_channels {
                return Err(Error::ArchitectureMismatch(format!(
                    "layer {i} expects {} input channels but layer {} produces {}",
                    s.in_channels,
                    i - 1,
                    specs[i - 1].out_channels
                )));
            }
            offsets.push(total);
            total += s.param_count();
        }
        Ok(Self { specs, offsets, param_count: total })
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn in_channels(&self) -> usize {
        self.specs.first().map_or(0, |s| s.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.specs.last().map_or(0, |s| s.out_channels)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.specs.iter().fold((h, w), |(h, w), s| s.output_size(h, w))
    }

    /// `(weights, bias)` ranges of layer `i` inside the flat parameter slice.
    pub fn layer_ranges(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off = self.offsets[i];
        let wc = self.specs[i].weight_count();
        (off..off + wc, off + wc..off + self.specs[i].param_count())
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &FeatureMap<T>) -> Result<(FeatureMap<T>, StackCache<T>)> {
        if params.len() < self.param_count {
            return Err(Error::ShapeMismatch(format!("{} parameters for a stack of {}", params.len(), self.param_count)));
        }
        if input.channels() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, stack expects {}",
                input.channels(),
                self.in_channels()
            )));
        }
        let mut layers = Vec::with_capacity(self.specs.len());
        let mut x = input.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            let (out_h, out_w) = spec.output_size(x.height(), x.width());
            let cols = im2col(spec, &x, out_h, out_w);
            let (wr, br) = self.layer_ranges(i);
            let (weights, bias) = (&params[wr], &params[br]);
            let p = out_h * out_w;
            let oc = spec.out_channels;
            let mut out: Vec<T> = bias.iter().copied().cycle().take(p * oc).collect();
            let kk = spec.patch_len();
            T::gemm(p, kk, oc, &cols, (kk as isize, 1), weights, (oc as isize, 1), T::one(), &mut out, (oc as isize, 1));
            if spec.relu {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            let in_shape = x.shape();
            x = FeatureMap::new(out_h, out_w, oc, out.clone())?;
            layers.push(LayerCache { in_shape, cols, out });
        }
        Ok((x, StackCache { layers }))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the stack input when `input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &StackCache<T>,
        d_out: &FeatureMap<T>,
        grads: &mut [T],
        input_grad: bool,
    ) -> Result<Option<FeatureMap<T>>> {
        if cache.layers.len() != self.specs.len() || grads.len() < self.param_count {
            return Err(Error::ShapeMismatch("cache or gradient buffer does not match the stack".into()));
        }
        let last = cache.layers.last().expect("non-empty stack");
        if d_out.data().len() != last.out.len() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} values, output has {}",
                d_out.data().len(),
                last.out.len()
            )));
        }
        let mut upstream = d_out.data().to_vec();
        for i in (0..self.specs.len()).rev() {
            let spec = &self.specs[i];
            let layer = &cache.layers[i];
            let oc = spec.out_channels;
            let p = layer.out.len() / oc;
            let kk = spec.patch_len();
            if spec.relu {
                for (g, &o) in upstream.iter_mut().zip(&layer.out) {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            let (wr, br) = self.layer_ranges(i);
            T::gemm(kk, p, oc, &layer.cols, (1, kk as isize), &upstream, (oc as isize, 1), T::one(), &mut grads[wr.clone()], (oc as isize, 1));
            let db = &mut grads[br];
            for row in upstream.chunks_exact(oc) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            if i == 0 && !input_grad {
                return Ok(None);
            }
            let mut dcols = vec![T::zero(); p * kk];
            T::gemm(p, oc, kk, &upstream, (oc as isize, 1), &params[wr], (1, oc as isize), T::zero(), &mut dcols, (kk as isize, 1));
            let (oh, ow) = spec.output_size(layer.in_shape.0, layer.in_shape.1);
            upstream = col2im(spec, &dcols, layer.in_shape, oh, ow);
        }
        let (h, w, c) = cache.layers[0].in_shape;
        Ok(Some(FeatureMap::new(h, w, c, upstream)?))
    }
}
