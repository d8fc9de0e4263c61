//! Episodic few-shot segmentation: fold splits, episode sampling, the
//! decoder head, training/evaluation loops and metrics.

mod decoder;
mod episode;
mod metrics;
mod train;

pub use decoder::{cross_entropy, masked_pool, predict, Decoder, DecoderArch, DecoderCache, DecoderGrads};
pub use episode::{make_folds, sample_episode, Episode, FoldSplit, Phase};
pub use metrics::{fbiou, iou, miou, region_recall, ConfusionCounts};
pub use train::{
    episode_eval, episode_gradients, episode_maps, episode_train, eval_episode, eval_episode_seed, run_episode,
    upsample_region, EpisodeConfig, EpisodeGrads, EpisodeMaps, EpisodeOutcome, EpisodeRecord, EvalReport,
    FewShotModel, RecallRow, TrainStats, RECALL_ALPHAS, summarize,
};
