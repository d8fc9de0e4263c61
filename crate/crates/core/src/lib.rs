//! Few-shot segmentation with query priors.
//!
//! The crate is organised around the data flow of the method:
//!
//! * [`image`] holds pixel containers, colour conversion, augmentation and the
//!   synthetic shapes dataset.
//! * [`patch`] splits images into local patches (SLIC and Felzenszwalb) and
//!   crops them for local contrastive learning.
//! * [`nn`] is a small convolutional encoder/decoder with exact reverse-mode
//!   gradients, momentum SGD and checkpoints.
//! * [`contrastive`] implements the InfoNCE losses, the FIFO key queues and the
//!   pretraining loop of the prior extractor.
//! * [`regionmap`] builds prior and guided region maps from cosine
//!   correspondence.
//! * [`fewshot`] samples episodes, trains the decoder and computes IoU-style
//!   metrics and region recall.

pub mod contrastive;
pub mod error;
pub mod fewshot;
pub mod image;
pub mod io;
pub mod nn;
pub mod patch;
pub mod regionmap;
pub mod rng;

pub use error::{Error, Result};
