use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{cross_entropy, masked_pool_backward, masked_pool_region, predict, Decoder, DecoderArch};
use super::episode::{sample_episode, Episode, FoldSplit, Phase};
use super::metrics::{region_recall, ConfusionCounts};
use crate::image::{BinaryMask, RgbImage, Sample};
use crate::nn::{Encoder, EncoderArch, FeatureMap, Real, Sgd};
use crate::regionmap::{fuse_maps, guided_region_map, prior_region_map, threshold_region, BinaryRegion, FusedMaps, Polarity, RegionMap};
use crate::rng;
use crate::{Error, Result};

/// Thresholds of the recall sweep.
pub const RECALL_ALPHAS: [f32; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const TAG_TRAIN: u64 = 0x7EA1;
const TAG_EVAL: u64 = 0xE7A1;
const RESAMPLE_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub shots: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub hidden: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub polarity: Polarity,
    /// Update the feature extractor during episode training; the prior
    /// extractor is always frozen.
    pub train_extractor: bool,
    pub arch: EncoderArch,
    pub alphas: Vec<f32>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            train_episodes: 200,
            eval_episodes: 1000,
            hidden: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            polarity: Polarity::AsIs,
            train_extractor: true,
            arch: EncoderArch::default(),
            alphas: RECALL_ALPHAS.to_vec(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::invalid("shots", "need at least one support image"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} is not a finite non-negative rate", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("{} is outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be finite and non-negative"));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alphas", "thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Feature extractor plus decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotModel {
    pub extractor: Encoder<f32>,
    pub decoder: Decoder<f32>,
}

impl FewShotModel {
    /// Freshly initialised (untrained) model.
    pub fn init(config: &EpisodeConfig, seed: u64) -> Result<Self> {
        let extractor = Encoder::init(config.arch.clone(), rng::derive(seed, 0xF0, 0))?;
        let decoder = Decoder::init(
            DecoderArch::new(config.arch.feature_channels(), config.hidden),
            rng::derive(seed, 0xF0, 1),
        )?;
        Ok(Self { extractor, decoder })
    }

    pub fn check(&self, prior: &Encoder<f32>) -> Result<()> {
        let c = self.extractor.arch().feature_channels();
        if prior.arch().feature_channels() != c {
            return Err(Error::ArchitectureMismatch(format!(
                "prior extractor has {} feature channels, feature extractor {c}",
                prior.arch().feature_channels()
            )));
        }
        if prior.arch().stride() != self.extractor.arch().stride() {
            return Err(Error::ArchitectureMismatch("prior and feature extractors produce different grids".into()));
        }
        if self.decoder.arch().feature_channels != c {
            return Err(Error::ArchitectureMismatch(format!(
                "decoder expects {} feature channels, feature extractor has {c}",
                self.decoder.arch().feature_channels
            )));
        }
        Ok(())
    }
}

/// Region maps of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMaps {
    pub prior: RegionMap,
    pub guided: RegionMap,
    pub fused: FusedMaps,
}

/// Prior map from the query's bridge and prior features; guided map as the
/// cell-wise max of the per-support maps.
pub fn episode_maps(prior: &Encoder<f32>, extractor: &Encoder<f32>, ep: &Episode, polarity: Polarity) -> Result<EpisodeMaps> {
    let xq = extractor.forward(&ep.query.0)?.features;
    let pq = prior.forward(&ep.query.0)?.features;
    let prior_map = prior_region_map(&xq, &pq)?;
    let guided: Vec<RegionMap> = ep
        .support
        .iter()
        .map(|(img, mask)| guided_region_map(&xq, &extractor.forward(img)?.features, mask))
        .collect::<Result<_>>()?;
    let guided = RegionMap::cellwise_max(&guided)?;
    let fused = fuse_maps(&prior_map, &guided, polarity)?;
    Ok(EpisodeMaps { prior: prior_map, guided, fused })
}

/// Loss and parameter gradients of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeGrads<T> {
    pub loss: T,
    pub extractor: Vec<T>,
    pub decoder: Vec<T>,
}

/// Cross-entropy of the decoded query against its mask, with gradients for
/// the feature extractor (through bridge and support features) and the
/// decoder. `maps` are constants.
pub fn episode_gradients<T: Real>(
    extractor: &Encoder<T>,
    decoder: &Decoder<T>,
    ep: &Episode,
    maps: &FusedMaps,
) -> Result<EpisodeGrads<T>> {
    let (out_q, cache_q) = extractor.forward_cached(&ep.query.0)?;
    let xq = out_q.features;
    let k = T::from_usize(ep.shots()).expect("count");
    let mut supports = Vec::with_capacity(ep.shots());
    let mut guider = vec![T::zero(); xq.channels()];
    for (img, mask) in &ep.support {
        let (out, cache) = extractor.forward_cached(img)?;
        let region = BinaryRegion::from_mask(mask, out.features.height(), out.features.width());
        let proto = masked_pool_region(&out.features, &region)?;
        for (g, &v) in guider.iter_mut().zip(proto.values()) {
            *g += v / k;
        }
        supports.push((cache, region, out.features.shape()));
    }

    let (logits, dcache) = decoder.forward_cached(&xq, maps, &guider)?;
    let gt = BinaryRegion::from_mask(&ep.query.1, xq.height(), xq.width());
    let (loss, d_logits) = cross_entropy(&logits, &gt)?;
    let dg = decoder.backward(&dcache, &d_logits)?;

    let mut g_ext = extractor.backward(&cache_q, Some(&dg.features), None)?;
    let d_proto: Vec<T> = dg.guider.iter().map(|&g| g / k).collect();
    for (cache, region, shape) in &supports {
        let d_xs: FeatureMap<T> = masked_pool_backward(*shape, region, &d_proto);
        let g = extractor.backward(cache, Some(&d_xs), None)?;
        g_ext.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(EpisodeGrads { loss, extractor: g_ext, decoder: dg.params })
}

/// Samples an episode whose support masks survive downsampling to `grid`;
/// redraws with derived seeds otherwise.
fn sample_usable(
    dataset: &[Sample],
    split: &FoldSplit,
    phase: Phase,
    shots: usize,
    seed: u64,
    stride: usize,
) -> Result<Episode> {
    for attempt in 0..RESAMPLE_ATTEMPTS {
        let s = if attempt == 0 { seed } else { rng::derive(seed, 0xA77, attempt) };
        let ep = sample_episode(dataset, split, phase, shots, s)?;
        let usable = ep.support.iter().all(|(img, m)| {
            let (h, w) = (img.height().div_ceil(stride), img.width().div_ceil(stride));
            BinaryRegion::from_mask(m, h, w).count_ones() > 0
        });
        if usable {
            return Ok(ep);
        }
    }
    Err(Error::EmptySupportMask)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Per-episode training loss, in order.
    pub losses: Vec<f32>,
    /// Class of every training episode.
    pub classes: Vec<usize>,
}

/// Trains the feature extractor and decoder on episodes of the split's
/// training classes. The prior extractor is frozen.
pub fn episode_train(
    dataset: &[Sample],
    split: &FoldSplit,
    prior: &Encoder<f32>,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<(FewShotModel, TrainStats)> {
    config.validate()?;
    let mut model = FewShotModel::init(config, seed)?;
    model.check(prior)?;
    let mut opt_f = Sgd::new(model.extractor.param_count(), config.lr, config.momentum, config.weight_decay);
    let mut opt_d = Sgd::new(model.decoder.params().len(), config.lr, config.momentum, config.weight_decay);
    let stride = model.extractor.arch().stride();
    let mut stats = TrainStats::default();
    for e in 0..config.train_episodes {
        let ep = sample_usable(dataset, split, Phase::Train, config.shots, rng::derive(seed, TAG_TRAIN, e as u64), stride)?;
        let maps = episode_maps(prior, &model.extractor, &ep, config.polarity)?;
        let g = episode_gradients(&model.extractor, &model.decoder, &ep, &maps.fused)?;
        if config.train_extractor {
            opt_f.step(model.extractor.params_mut(), &g.extractor)?;
        }
        opt_d.step(model.decoder.params_mut(), &g.decoder)?;
        stats.losses.push(g.loss);
        stats.classes.push(ep.class);
    }
    Ok((model, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub class: usize,
    pub query_index: usize,
    pub counts: ConfusionCounts,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub alpha: f32,
    pub recall_p: f64,
    pub recall_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub phase: Phase,
    pub miou: f64,
    pub fbiou: f64,
    /// Class id -> IoU over the class's accumulated pixel counts.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub recall: Vec<RecallRow>,
    /// Episodes whose ground truth survived downsampling to the map grid.
    pub recall_episodes: usize,
    #[serde(skip)]
    pub episodes: Vec<EpisodeRecord>,
}

/// Per-episode evaluation output.
pub struct EpisodeOutcome {
    pub episode: Episode,
    pub maps: EpisodeMaps,
    /// Prediction at image resolution.
    pub prediction: BinaryMask,
    pub counts: ConfusionCounts,
    /// `(recall_p, recall_g)` per threshold, if the ground truth is non-empty
    /// on the map grid.
    pub recall: Option<Vec<(f64, f64)>>,
}

/// Upsamples a grid prediction to `width x height` by nearest neighbour.
pub fn upsample_region(region: &BinaryRegion, width: usize, height: usize) -> BinaryMask {
    let (h, w) = region.grid();
    BinaryMask::new(w, h, region.data().to_vec()).expect("binary cells").resize_nearest(width, height)
}

/// Runs one episode through the model.
pub fn run_episode(
    ep: Episode,
    prior: &Encoder<f32>,
    model: &FewShotModel,
    config: &EpisodeConfig,
) -> Result<EpisodeOutcome> {
    let maps = episode_maps(prior, &model.extractor, &ep, config.polarity)?;
    let xq = model.extractor.forward(&ep.query.0)?.features;
    let mut guider = vec![0.0f32; xq.channels()];
    for (img, mask) in &ep.support {
        let xs = model.extractor.forward(img)?.features;
        let proto = super::decoder::masked_pool(&xs, mask)?;
        for (g, &v) in guider.iter_mut().zip(proto.values()) {
            *g += v / ep.shots() as f32;
        }
    }
    let logits = model.decoder.forward(&xq, &maps.fused, &guider)?;
    let (qimg, qmask): (&RgbImage, &BinaryMask) = (&ep.query.0, &ep.query.1);
    let prediction = upsample_region(&predict(&logits), qimg.width(), qimg.height());
    let counts = ConfusionCounts::from_masks(&prediction, qmask)?;
    let gt = BinaryRegion::from_mask(qmask, xq.height(), xq.width());
    let recall = if gt.count_ones() > 0 {
        Some(
            config
                .alphas
                .iter()
                .map(|&a| {
                    Ok((
                        region_recall(&threshold_region(&maps.prior, a), &gt)?,
                        region_recall(&threshold_region(&maps.guided, a), &gt)?,
                    ))
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    Ok(EpisodeOutcome { episode: ep, maps, prediction, counts, recall })
}

/// Seed of evaluation episode `i`.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, TAG_EVAL, i as u64)
}

/// Samples evaluation episode `i` of a run.
pub fn eval_episode(dataset: &[Sample], split: &FoldSplit, phase: Phase, config: &EpisodeConfig, stride: usize, seed: u64, i: usize) -> Result<Episode> {
    sample_usable(dataset, split, phase, config.shots, eval_episode_seed(seed, i), stride)
}

/// mIoU / FBIoU over `config.eval_episodes` sampled episodes plus the recall
/// sweep of both maps. Episodes run in parallel; reduction is in episode order.
pub fn episode_eval(
    dataset: &[Sample],
    split: &FoldSplit,
    phase: Phase,
    prior: &Encoder<f32>,
    model: &FewShotModel,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    model.check(prior)?;
    let stride = model.extractor.arch().stride();
    let outcomes: Vec<(EpisodeRecord, Option<Vec<(f64, f64)>>)> = (0..config.eval_episodes)
        .into_par_iter()
        .map(|i| {
            let ep = eval_episode(dataset, split, phase, config, stride, seed, i)?;
            let (class, query_index) = (ep.class, ep.query_index);
            let out = run_episode(ep, prior, model, config)?;
            let record = EpisodeRecord { episode: i, class, query_index, counts: out.counts, iou: out.counts.iou() };
            Ok((record, out.recall))
        })
        .collect::<Result<_>>()?;
    summarize(split.fold, phase, &config.alphas, outcomes)
}

/// Reduces per-episode records (and optional recall sweeps) into a report,
/// in the given order.
pub fn summarize(
    fold: usize,
    phase: Phase,
    alphas: &[f32],
    outcomes: Vec<(EpisodeRecord, Option<Vec<(f64, f64)>>)>,
) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::invalid("eval_episodes", "need at least one episode"));
    }
    let mut per_class: BTreeMap<usize, ConfusionCounts> = BTreeMap::new();
    let mut total = ConfusionCounts::default();
    let mut sums = vec![(0.0, 0.0); alphas.len()];
    let mut recall_episodes = 0;
    let mut episodes = Vec::with_capacity(outcomes.len());
    for (record, recall) in outcomes {
        per_class.entry(record.class).or_default().add(&record.counts);
        total.add(&record.counts);
        if let Some(r) = recall {
            recall_episodes += 1;
            for (s, (p, g)) in sums.iter_mut().zip(r) {
                s.0 += p;
                s.1 += g;
            }
        }
        episodes.push(record);
    }
    let per_class_iou: BTreeMap<usize, f64> = per_class.iter().map(|(&c, counts)| (c, counts.iou())).collect();
    let miou = per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64;
    let n = recall_episodes.max(1) as f64;
    let recall = alphas
        .iter()
        .zip(&sums)
        .map(|(&alpha, &(p, g))| RecallRow { alpha, recall_p: p / n, recall_g: g / n })
        .collect();
    Ok(EvalReport { fold, phase, miou, fbiou: total.fbiou(), per_class_iou, recall, recall_episodes, episodes })
}

impl EvalReport {
    /// One summary row: fold, phase, mIoU, FBIoU and one column per class.
    pub fn metrics_csv(&self) -> String {
        let mut head = String::from("fold,phase,miou,fbiou");
        let mut row = format!("{},{},{},{}", self.fold, self.phase.as_str(), self.miou, self.fbiou);
        for (c, v) in &self.per_class_iou {
            head.push_str(&format!(",iou_class_{c}"));
            row.push_str(&format!(",{v}"));
        }
        format!("{head}\n{row}\n")
    }

    /// One row per evaluated episode with its raw pixel counts.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("fold,phase,episode,class,query_index,tp,fp,fn,tn,iou\n");
        for r in &self.episodes {
            let c = r.counts;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.fold,
                self.phase.as_str(),
                r.episode,
                r.class,
                r.query_index,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                r.iou
            ));
        }
        out
    }

    pub fn recall_csv(&self) -> String {
        let mut out = String::from("alpha,recall_p,recall_g\n");
        for r in &self.recall {
            out.push_str(&format!("{},{},{}\n", r.alpha, r.recall_p, r.recall_g));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fewshot::make_folds;
    use crate::image::synth_dataset;

    fn small_config() -> EpisodeConfig {
        EpisodeConfig {
            train_episodes: 6,
            eval_episodes: 8,
            hidden: 4,
            arch: EncoderArch::tiny(4, 4),
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn train_and_eval_are_deterministic() {
        let data = synth_dataset(48, 4, 32, 1).unwrap();
        let split = &make_folds(4, 2).unwrap()[0];
        let config = small_config();
        let prior = Encoder::init(config.arch.clone(), 3).unwrap();
        let (m1, s1) = episode_train(&data, split, &prior, &config, 5).unwrap();
        let (m2, s2) = episode_train(&data, split, &prior, &config, 5).unwrap();
        assert_eq!((&m1, &s1), (&m2, &s2));
        assert!(s1.classes.iter().all(|c| split.train_classes.contains(c)));
        assert!(s1.losses.iter().all(|l| l.is_finite() && *l >= 0.0));

        let r1 = episode_eval(&data, split, Phase::Test, &prior, &m1, &config, 9).unwrap();
        let r2 = episode_eval(&data, split, Phase::Test, &prior, &m1, &config, 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.episodes.len(), 8);
        assert!(r1.per_class_iou.keys().all(|c| split.test_classes.contains(c)));
        assert!((0.0..=1.0).contains(&r1.miou) && (0.0..=1.0).contains(&r1.fbiou));
        for w in r1.recall.windows(2) {
            assert!(w[1].recall_p <= w[0].recall_p && w[1].recall_g <= w[0].recall_g);
        }
        assert_eq!(r1.metrics_csv().lines().count(), 2);
        assert_eq!(r1.episodes_csv().lines().count(), 9);
        assert_eq!(r1.recall_csv().lines().count(), 10);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let config = small_config();
        let model = FewShotModel::init(&config, 1).unwrap();
        let prior = Encoder::init(EncoderArch::tiny(5, 4), 2).unwrap();
        assert!(matches!(model.check(&prior), Err(Error::ArchitectureMismatch(_))));
    }
}
