use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, RgbImage, Sample};
use crate::rng;
use crate::{Error, Result};

/// Class partition of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

impl FoldSplit {
    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train_classes,
            Phase::Test => &self.test_classes,
        }
    }
}

/// Fold `i` tests on the contiguous block `[i*n/f, (i+1)*n/f)` and trains on
/// the rest.
pub fn make_folds(num_classes: usize, num_folds: usize) -> Result<Vec<FoldSplit>> {
    if num_folds < 2 {
        return Err(Error::invalid("num_folds", "need at least two folds"));
    }
    if num_classes == 0 || num_classes % num_folds != 0 {
        return Err(Error::invalid(
            "num_classes",
            format!("{num_classes} classes do not split evenly into {num_folds} folds"),
        ));
    }
    let per = num_classes / num_folds;
    Ok((0..num_folds)
        .map(|fold| {
            let test = fold * per..(fold + 1) * per;
            FoldSplit {
                fold,
                train_classes: (0..num_classes).filter(|c| !test.contains(c)).collect(),
                test_classes: test.collect(),
            }
        })
        .collect())
}

/// One few-shot task: `K` labelled supports and a query of class `class`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class: usize,
    pub support: Vec<(RgbImage, BinaryMask)>,
    pub query: (RgbImage, BinaryMask),
    /// Dataset indices of the supports and of the query.
    pub support_indices: Vec<usize>,
    pub query_index: usize,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// Samples a class uniformly from the phase's class set, then `shots + 1`
/// distinct images of that class.
pub fn sample_episode(dataset: &[Sample], split: &FoldSplit, phase: Phase, shots: usize, seed: u64) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::invalid("shots", "need at least one support image"));
    }
    let classes = split.classes(phase);
    if classes.is_empty() {
        return Err(Error::invalid("split", format!("no {} classes", phase.as_str())));
    }
    let pools: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            (0..dataset.len())
                .filter(|&i| dataset[i].class == c && dataset[i].mask.count_ones() > 0)
                .collect()
        })
        .collect();
    if let Some((&class, pool)) = classes.iter().zip(&pools).find(|(_, p)| p.len() < shots + 1) {
        return Err(Error::InsufficientImages { class, available: pool.len(), needed: shots + 1 });
    }

    let mut rng = rng::seeded(seed);
    let pick = rng.gen_range(0..classes.len());
    let chosen: Vec<usize> = pools[pick].choose_multiple(&mut rng, shots + 1).copied().collect();
    let (query_index, support_indices) = (chosen[shots], chosen[..shots].to_vec());
    let take = |i: usize| (dataset[i].image.clone(), dataset[i].mask.clone());
    Ok(Episode {
        class: classes[pick],
        support: support_indices.iter().map(|&i| take(i)).collect(),
        query: take(query_index),
        support_indices,
        query_index,
    })
}
