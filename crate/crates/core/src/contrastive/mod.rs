//! Contrastive pretraining of the prior extractor.
//!
//! A query encoder is trained against a momentum-updated key encoder. Whole
//! images give the global InfoNCE term; superpixel patches give the local
//! term. Each branch keeps its own FIFO queue of negative keys.

mod loss;
mod pretrain;
mod queue;

pub use loss::{combined_loss, info_nce, local_info_nce, InfoNce, LossWeights};
pub use pretrain::{pretrain, EpochStats, PatchMethod, PretrainStats, Pretrainer, ContrastiveConfig};
pub use queue::EmbeddingQueue;
