use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{image_tensor, l2_norm, ConvSpec, ConvStack, Embedding, FeatureMap, Real, StackCache};
use crate::image::RgbImage;
use crate::rng;
use crate::{Error, Result};

/// Layer list of an encoder: a conv stack, spatial average pooling and a
/// linear projection head producing the embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub layers: Vec<ConvSpec>,
    pub embed_dim: usize,
    /// Smallest accepted input side in pixels.
    pub min_input: usize,
}

impl Default for EncoderArch {
    /// 3 x (conv3x3 + ReLU) with widths 16/32/64, stride 4 overall, 64 -> 32 head.
    fn default() -> Self {
        Self {
            layers: vec![ConvSpec::conv3(3, 16, 2), ConvSpec::conv3(16, 32, 2), ConvSpec::conv3(32, 64, 1)],
            embed_dim: 32,
            min_input: 32,
        }
    }
}

impl EncoderArch {
    /// Same topology as the default with every width set to `width`.
    pub fn tiny(width: usize, embed_dim: usize) -> Self {
        Self {
            layers: vec![ConvSpec::conv3(3, width, 2), ConvSpec::conv3(width, width, 2), ConvSpec::conv3(width, width, 1)],
            embed_dim,
            min_input: 8,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvSpec::param_count).sum::<usize>() + (self.feature_channels() + 1) * self.embed_dim
    }

    fn stack(&self) -> Result<ConvStack> {
        if self.layers.first().map(|l| l.in_channels) != Some(3) {
            return Err(Error::ArchitectureMismatch("encoder must take 3 input channels".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be positive"));
        }
        ConvStack::new(self.layers.clone())
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T = f32> {
    pub features: FeatureMap<T>,
    pub embedding: Embedding<T>,
}

/// Activations saved by [`Encoder::forward_cached`].
pub struct EncoderCache<T> {
    stack: StackCache<T>,
    feature_shape: (usize, usize, usize),
    pooled: Vec<T>,
    projected_norm: T,
    embedding: Vec<T>,
}

/// Conv encoder with a flat parameter vector (stack weights, then head
/// weights `C x E`, then head bias).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T = f32> {
    arch: EncoderArch,
    stack: ConvStack,
    params: Vec<T>,
}

impl<T: Real> Encoder<T> {
    pub fn zeros(arch: EncoderArch) -> Result<Self> {
        let stack = arch.stack()?;
        let params = vec![T::zero(); arch.param_count()];
        Ok(Self { arch, stack, params })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: EncoderArch, seed: u64) -> Result<Self> {
        let mut enc = Self::zeros(arch)?;
        let mut rng = rng::derived(seed, 0xE7C, 0);
        for i in 0..enc.stack.specs().len() {
            let spec = enc.stack.specs()[i];
            let fan_in = (spec.kernel * spec.kernel * spec.in_channels) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let (wr, _) = enc.stack.layer_ranges(i);
            for w in &mut enc.params[wr] {
                *w = T::lit(normal.sample(&mut rng));
            }
        }
        let c = enc.arch.feature_channels();
        let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("valid std");
        let head = enc.stack.param_count();
        for w in &mut enc.params[head..head + c * enc.arch.embed_dim] {
            *w = T::lit(normal.sample(&mut rng));
        }
        Ok(enc)
    }

    pub fn from_params(arch: EncoderArch, params: Vec<T>) -> Result<Self> {
        let stack = arch.stack()?;
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, stack, params })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            arch: self.arch.clone(),
            stack: self.stack.clone(),
            params: self.params.iter().map(|&v| U::from(v).expect("finite")).collect(),
        }
    }

    fn check_input(&self, img: &RgbImage) -> Result<()> {
        let min = self.arch.min_input;
        if img.width() < min || img.height() < min {
            return Err(Error::ImageTooSmall { width: img.width(), height: img.height(), min });
        }
        Ok(())
    }

    pub fn forward(&self, img: &RgbImage) -> Result<EncoderOutput<T>> {
        self.forward_cached(img).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, img: &RgbImage) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
        self.check_input(img)?;
        let (features, stack_cache) = self.stack.forward(&self.params, &image_tensor(img))?;
        let c = features.channels();
        let e = self.arch.embed_dim;
        let cells = T::from_usize(features.cells()).expect("cell count");
        let mut pooled = vec![T::zero(); c];
        for i in 0..features.cells() {
            for (acc, &v) in pooled.iter_mut().zip(features.cell(i)) {
                *acc += v;
            }
        }
        pooled.iter_mut().for_each(|v| *v = *v / cells);

        let head = self.stack.param_count();
        let (head_w, head_b) = self.params[head..].split_at(c * e);
        let mut projected = head_b.to_vec();
        T::gemm(1, c, e, &pooled, (c as isize, 1), head_w, (e as isize, 1), T::one(), &mut projected, (e as isize, 1));
        let projected_norm = l2_norm(&projected);
        let embedding = Embedding::normalize(projected);
        let cache = EncoderCache {
            stack: stack_cache,
            feature_shape: features.shape(),
            pooled,
            projected_norm,
            embedding: embedding.values().to_vec(),
        };
        Ok((EncoderOutput { features, embedding }, cache))
    }

    /// Parameter gradients given upstream gradients at the feature map and/or
    /// the normalised embedding.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        d_features: Option<&FeatureMap<T>>,
        d_embedding: Option<&[T]>,
    ) -> Result<Vec<T>> {
        let (h, w, c) = cache.feature_shape;
        let e = self.arch.embed_dim;
        let mut grads = vec![T::zero(); self.params.len()];
        let mut d_feat = match d_features {
            Some(d) if d.shape() != cache.feature_shape => {
                return Err(Error::ShapeMismatch(format!(
                    "feature gradient {:?} vs features {:?}",
                    d.shape(),
                    cache.feature_shape
                )))
            }
            Some(d) => d.clone(),
            None => FeatureMap::zeros(h, w, c),
        };

        if let Some(d_emb) = d_embedding {
            if d_emb.len() != e {
                return Err(Error::ShapeMismatch(format!("embedding gradient of length {} vs {e}", d_emb.len())));
            }
            if cache.projected_norm > T::zero() {
                // d(z/|z|) = (I - u uᵀ) / |z|
                let u = &cache.embedding;
                let along: T = super::dot(u, d_emb);
                let dz: Vec<T> =
                    d_emb.iter().zip(u).map(|(&g, &ui)| (g - ui * along) / cache.projected_norm).collect();
                let head = self.stack.param_count();
                let (gw, gb) = grads[head..].split_at_mut(c * e);
                T::gemm(c, 1, e, &cache.pooled, (1, 1), &dz, (e as isize, 1), T::one(), gw, (e as isize, 1));
                gb.iter_mut().zip(&dz).for_each(|(a, &g)| *a += g);

                let head_w = &self.params[head..head + c * e];
                let mut d_pooled = vec![T::zero(); c];
                T::gemm(c, e, 1, head_w, (e as isize, 1), &dz, (1, 1), T::zero(), &mut d_pooled, (1, 1));
                let cells = T::from_usize(h * w).expect("cell count");
                for i in 0..h * w {
                    for (acc, &g) in d_feat.cell_mut(i).iter_mut().zip(&d_pooled) {
                        *acc += g / cells;
                    }
                }
            }
        }

        self.stack.backward(&self.params, &cache.stack, &d_feat, &mut grads, false)?;
        Ok(grads)
    }
}
