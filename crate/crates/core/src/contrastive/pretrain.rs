use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{combined_loss, info_nce, local_info_nce, EmbeddingQueue, LossWeights};
use crate::image::{two_views, AugSpec, RgbImage};
use crate::nn::{momentum_update, parse_tensor_file, tensor_file_bytes, Encoder, EncoderArch, Sgd};
use crate::patch::{extract_patches, felz_segment, slic_segment, FelzParams, PatchSegmentation, SlicParams};
use crate::rng;
use crate::{Error, Result};

const TAG_ORDER: u64 = 0x0DE5;
const TAG_SAMPLE: u64 = 0x5A3E;
const TAG_PATCH: u64 = 0x9A7C;
const TAG_QUEUE: u64 = 0x0E0E;
const TAG_INIT: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PatchMethod {
    Slic(SlicParams),
    Felz(FelzParams),
}

impl PatchMethod {
    pub fn segment(&self, img: &RgbImage) -> Result<PatchSegmentation> {
        match self {
            PatchMethod::Slic(p) => slic_segment(&img.to_lab(), p),
            PatchMethod::Felz(p) => felz_segment(img, p),
        }
    }
}

impl Default for PatchMethod {
    /// Four clusters, i.e. ~32x32 patches on 64x64 images.
    fn default() -> Self {
        PatchMethod::Slic(SlicParams::for_patch_area(64, 64, 32 * 32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f32,
    pub queue_capacity: usize,
    pub patch_queue_capacity: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub patches: PatchMethod,
    pub min_patch_area: usize,
    /// Side of the square patch crops fed to the encoder.
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Global views are resized to this side before encoding.
    pub view_size: usize,
    /// Momentum of the key encoder.
    pub mu: f32,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub aug: AugSpec,
    pub arch: EncoderArch,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            queue_capacity: 4096,
            patch_queue_capacity: 4096,
            batch_size: 8,
            epochs: 1,
            weights: LossWeights::default(),
            patches: PatchMethod::default(),
            min_patch_area: 64,
            patch_size: 32,
            patches_per_image: 4,
            view_size: 32,
            mu: 0.999,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            aug: AugSpec::default(),
            arch: EncoderArch::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", format!("{} must be positive", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.queue_capacity < self.batch_size {
            return Err(Error::invalid("queue_capacity", "must be at least batch_size"));
        }
        if self.patch_queue_capacity < self.batch_size {
            return Err(Error::invalid("patch_queue_capacity", "must be at least batch_size"));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid("mu", format!("{} not in [0, 1]", self.mu)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and non-negative"));
        }
        if self.patch_size < self.arch.min_input || self.view_size < self.arch.min_input {
            return Err(Error::invalid("patch_size", "patch and view sizes must reach the encoder minimum"));
        }
        self.aug.validate()
    }
}

/// Averages over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_global: f32,
    pub l_local: f32,
    pub l_total: f32,
    pub pos_sim: f32,
    pub neg_sim: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub epochs: Vec<EpochStats>,
    /// Images whose view produced no usable patch.
    pub skipped_local: usize,
}

impl PretrainStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_global,l_local,l_total,pos_sim,neg_sim\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, e.l_global, e.l_local, e.l_total, e.pos_sim, e.neg_sim));
        }
        out
    }
}

struct SampleOut {
    grads: Vec<f32>,
    global_loss: Option<f32>,
    local_loss: Option<f32>,
    pos_sim: Vec<f32>,
    neg_sim: Vec<f32>,
    global_key: Option<Vec<f32>>,
    patch_keys: Vec<Vec<f32>>,
}

#[derive(Default)]
struct EpochAccumulator {
    global: (f64, usize),
    local: (f64, usize),
    total: (f64, usize),
    pos: (f64, usize),
    neg: (f64, usize),
}

fn mean((sum, n): (f64, usize)) -> f32 {
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Resumable pretraining state: query and key encoders, optimiser and queues.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrainer {
    config: ContrastiveConfig,
    seed: u64,
    query: Encoder<f32>,
    key: Encoder<f32>,
    opt: Sgd<f32>,
    global_queue: EmbeddingQueue<f32>,
    patch_queue: EmbeddingQueue<f32>,
    epoch: usize,
    stats: PretrainStats,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    seed: u64,
    epoch: usize,
    config: ContrastiveConfig,
    stats: PretrainStats,
    global_head: usize,
    global_fill: usize,
    patch_head: usize,
    patch_fill: usize,
}

fn random_queue(capacity: usize, dim: usize, seed: u64) -> EmbeddingQueue<f32> {
    let mut rng = rng::seeded(seed);
    let mut queue = EmbeddingQueue::new(capacity, dim);
    let keys: Vec<Vec<f32>> = (0..capacity)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    queue.enqueue(&keys).expect("normalised random keys");
    queue
}

impl Pretrainer {
    /// Fresh state. Queues start filled with random unit keys.
    pub fn new(config: ContrastiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let query = Encoder::init(config.arch.clone(), rng::derive(seed, TAG_INIT, 0))?;
        let dim = config.arch.embed_dim;
        Ok(Self {
            key: query.clone(),
            opt: Sgd::new(query.param_count(), config.lr, config.momentum, config.weight_decay),
            global_queue: random_queue(config.queue_capacity, dim, rng::derive(seed, TAG_QUEUE, 0)),
            patch_queue: random_queue(config.patch_queue_capacity, dim, rng::derive(seed, TAG_QUEUE, 1)),
            query,
            config,
            seed,
            epoch: 0,
            stats: PretrainStats::default(),
        })
    }

    pub fn config(&self) -> &ContrastiveConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn stats(&self) -> &PretrainStats {
        &self.stats
    }

    pub fn query_encoder(&self) -> &Encoder<f32> {
        &self.query
    }

    pub fn key_encoder(&self) -> &Encoder<f32> {
        &self.key
    }

    pub fn global_queue(&self) -> &EmbeddingQueue<f32> {
        &self.global_queue
    }

    pub fn patch_queue(&self) -> &EmbeddingQueue<f32> {
        &self.patch_queue
    }

    pub fn into_parts(self) -> (Encoder<f32>, PretrainStats) {
        (self.query, self.stats)
    }

    /// Serialises the full state in the tensor container format.
    pub fn to_state_bytes(&self) -> Vec<u8> {
        let header = StateHeader {
            kind: "pretrain_state".into(),
            seed: self.seed,
            epoch: self.epoch,
            config: self.config.clone(),
            stats: self.stats.clone(),
            global_head: self.global_queue.head(),
            global_fill: self.global_queue.len(),
            patch_head: self.patch_queue.head(),
            patch_fill: self.patch_queue.len(),
        };
        let mut data = Vec::new();
        data.extend_from_slice(self.query.params());
        data.extend_from_slice(self.key.params());
        data.extend_from_slice(self.opt.velocity());
        data.extend_from_slice(self.global_queue.storage());
        data.extend_from_slice(self.patch_queue.storage());
        tensor_file_bytes(&serde_json::to_vec(&header).expect("header serialises"), &data)
    }

    /// Restores a state written by [`Pretrainer::to_state_bytes`]. Only the
    /// epoch budget of `config` may differ from the saved configuration.
    pub fn from_state_bytes(bytes: &[u8], config: &ContrastiveConfig, seed: u64) -> Result<Self> {
        let path = std::path::Path::new("<pretrain state>");
        let file = parse_tensor_file(bytes, path)?;
        let header: StateHeader = serde_json::from_slice(&file.header)?;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        if header.kind != "pretrain_state" {
            return Err(bad("not a pretraining state"));
        }
        let mut saved = header.config.clone();
        saved.epochs = config.epochs;
        if &saved != config || header.seed != seed {
            return Err(bad("configuration or seed differs from the saved run"));
        }
        let n = config.arch.param_count();
        let dim = config.arch.embed_dim;
        let sizes = [n, n, n, config.queue_capacity * dim, config.patch_queue_capacity * dim];
        if file.data.len() != sizes.iter().sum::<usize>() {
            return Err(bad("payload size does not match the configuration"));
        }
        let mut rest = file.data.as_slice();
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head.to_vec()
        };
        let query = Encoder::from_params(config.arch.clone(), take(n))?;
        let key = Encoder::from_params(config.arch.clone(), take(n))?;
        let mut opt = Sgd::new(n, config.lr, config.momentum, config.weight_decay);
        opt.set_velocity(take(n))?;
        let global_queue = EmbeddingQueue::from_parts(
            config.queue_capacity,
            dim,
            take(config.queue_capacity * dim),
            header.global_head,
            header.global_fill,
        )?;
        let patch_queue = EmbeddingQueue::from_parts(
            config.patch_queue_capacity,
            dim,
            take(config.patch_queue_capacity * dim),
            header.patch_head,
            header.patch_fill,
        )?;
        Ok(Self {
            config: config.clone(),
            seed,
            query,
            key,
            opt,
            global_queue,
            patch_queue,
            epoch: header.epoch,
            stats: header.stats,
        })
    }

    fn sample_step(&self, img: &RgbImage, sample_seed: u64) -> Result<SampleOut> {
        let cfg = &self.config;
        let tau = cfg.tau;
        let mut grads = vec![0.0f32; self.query.param_count()];
        let mut out = SampleOut {
            grads: Vec::new(),
            global_loss: None,
            local_loss: None,
            pos_sim: Vec::new(),
            neg_sim: Vec::new(),
            global_key: None,
            patch_keys: Vec::new(),
        };

        let (view_q, view_k) = two_views(img, &cfg.aug.with_seed(sample_seed))?;
        let q_img = view_q.resize(cfg.view_size, cfg.view_size);
        let k_img = view_k.resize(cfg.view_size, cfg.view_size);
        let (q_out, q_cache) = self.query.forward_cached(&q_img)?;
        let k_emb = self.key.forward(&k_img)?.embedding;
        if q_out.embedding.is_normalized() && k_emb.is_normalized() {
            let term = info_nce(q_out.embedding.values(), k_emb.values(), &self.global_queue, tau)?;
            let scale = cfg.weights.global;
            let upstream: Vec<f32> = term.grad_q.iter().map(|g| g * scale).collect();
            add_into(&mut grads, &self.query.backward(&q_cache, None, Some(&upstream))?);
            out.global_loss = Some(term.loss);
            out.pos_sim.push(term.positive_similarity);
            out.neg_sim.push(term.negative_similarity);
            out.global_key = Some(k_emb.into_values());
        }

        // Patches come from the query view; each crop is augmented on its own.
        let seg = cfg.patches.segment(&view_q)?;
        let crops = extract_patches(&view_q, &seg, cfg.min_patch_area, cfg.patch_size)?;
        if !crops.is_empty() && cfg.patches_per_image > 0 {
            let mut prng = rng::derived(sample_seed, TAG_PATCH, 0);
            let chosen = sample_indices(&mut prng, crops.len(), cfg.patches_per_image.min(crops.len())).into_vec();
            let mut losses = Vec::with_capacity(chosen.len());
            let mut terms = Vec::with_capacity(chosen.len());
            for (j, &ci) in chosen.iter().enumerate() {
                let aug = cfg.aug.with_seed(rng::derive(sample_seed, TAG_PATCH, j as u64 + 1));
                let (pq, pk) = two_views(&crops[ci].image, &aug)?;
                let (pq_out, pq_cache) = self.query.forward_cached(&pq)?;
                let pk_emb = self.key.forward(&pk)?.embedding;
                if !(pq_out.embedding.is_normalized() && pk_emb.is_normalized()) {
                    continue;
                }
                let term = local_info_nce(pq_out.embedding.values(), pk_emb.values(), &self.patch_queue, tau)?;
                losses.push(term.loss);
                out.pos_sim.push(term.positive_similarity);
                out.neg_sim.push(term.negative_similarity);
                out.patch_keys.push(pk_emb.into_values());
                terms.push((term.grad_q, pq_cache));
            }
            if !losses.is_empty() {
                let scale = cfg.weights.local / losses.len() as f32;
                for (grad_q, cache) in terms {
                    let upstream: Vec<f32> = grad_q.iter().map(|g| g * scale).collect();
                    add_into(&mut grads, &self.query.backward(&cache, None, Some(&upstream))?);
                }
                out.local_loss = Some(losses.iter().sum::<f32>() / losses.len() as f32);
            }
        }
        out.grads = grads;
        Ok(out)
    }

    /// One pass over `dataset` in a seeded order.
    pub fn run_epoch(&mut self, dataset: &[RgbImage]) -> Result<&EpochStats> {
        if dataset.is_empty() {
            return Err(Error::invalid("dataset", "must not be empty"));
        }
        let epoch = self.epoch;
        let mut order_rng = rng::derived(self.seed, TAG_ORDER, epoch as u64);
        let order = sample_indices(&mut order_rng, dataset.len(), dataset.len()).into_vec();
        let mut acc = EpochAccumulator::default();

        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let step = (b * self.config.batch_size + i) as u64;
                    (idx, rng::derive(self.seed, TAG_SAMPLE, (epoch as u64) << 32 | step))
                })
                .collect();
            let outs: Vec<SampleOut> =
                jobs.par_iter().map(|&(idx, s)| self.sample_step(&dataset[idx], s)).collect::<Result<_>>()?;

            let mut grads = vec![0.0f32; self.query.param_count()];
            let inv = 1.0 / outs.len() as f32;
            for o in &outs {
                for (g, &v) in grads.iter_mut().zip(&o.grads) {
                    *g += v * inv;
                }
                let g = o.global_loss.unwrap_or(0.0);
                let l = o.local_loss.unwrap_or(0.0);
                if let Some(g) = o.global_loss {
                    acc.global.0 += g as f64;
                    acc.global.1 += 1;
                }
                match o.local_loss {
                    Some(l) => {
                        acc.local.0 += l as f64;
                        acc.local.1 += 1;
                    }
                    None => self.stats.skipped_local += 1,
                }
                acc.total.0 += combined_loss(g, l, self.config.weights) as f64;
                acc.total.1 += 1;
                acc.pos.0 += o.pos_sim.iter().map(|&v| v as f64).sum::<f64>();
                acc.pos.1 += o.pos_sim.len();
                acc.neg.0 += o.neg_sim.iter().map(|&v| v as f64).sum::<f64>();
                acc.neg.1 += o.neg_sim.len();
            }

            self.opt.step(self.query.params_mut(), &grads)?;
            momentum_update(&mut self.key, &self.query, self.config.mu)?;
            let global_keys: Vec<&Vec<f32>> = outs.iter().filter_map(|o| o.global_key.as_ref()).collect();
            self.global_queue.enqueue(&global_keys)?;
            let patch_keys: Vec<&Vec<f32>> = outs.iter().flat_map(|o| o.patch_keys.iter()).collect();
            self.patch_queue.enqueue(&patch_keys)?;
        }

        self.epoch += 1;
        self.stats.epochs.push(EpochStats {
            epoch: self.epoch,
            l_global: mean(acc.global),
            l_local: mean(acc.local),
            l_total: mean(acc.total),
            pos_sim: mean(acc.pos),
            neg_sim: mean(acc.neg),
        });
        Ok(self.stats.epochs.last().expect("just pushed"))
    }
}

fn add_into(acc: &mut [f32], v: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Trains the prior extractor for `config.epochs` epochs.
pub fn pretrain(dataset: &[RgbImage], config: &ContrastiveConfig, seed: u64) -> Result<(Encoder<f32>, PretrainStats)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "must not be empty"));
    }
    let mut trainer = Pretrainer::new(config.clone(), seed)?;
    for _ in 0..config.epochs {
        trainer.run_epoch(dataset)?;
    }
    Ok(trainer.into_parts())
}
