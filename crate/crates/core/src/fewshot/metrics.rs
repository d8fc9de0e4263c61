//! IoU-family metrics and region recall.
//!
//! IoU is `TP / (TP + FP + FN)`; when prediction and ground truth are both
//! empty the union is empty and IoU is defined as 1.

use serde::{Deserialize, Serialize};

use crate::image::BinaryMask;
use crate::regionmap::BinaryRegion;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Foreground IoU.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// IoU of the complemented masks.
    pub fn background_iou(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn fbiou(&self) -> f64 {
        0.5 * (self.iou() + self.background_iou())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.iou())
}

pub fn fbiou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.fbiou())
}

/// Mean of per-class foreground IoUs.
pub fn miou(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::invalid("per_class", "no classes to average"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// `|R ∩ GT| / |GT|`.
pub fn region_recall(region: &BinaryRegion, gt: &BinaryRegion) -> Result<f64> {
    if region.grid() != gt.grid() {
        return Err(Error::ShapeMismatch(format!("region grid {:?} vs ground truth {:?}", region.grid(), gt.grid())));
    }
    let total = gt.count_ones();
    if total == 0 {
        return Err(Error::EmptyMask("ground truth"));
    }
    let hit = region.data().iter().zip(gt.data()).filter(|&(&r, &g)| r == 1 && g == 1).count();
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(w, h, bits.to_vec()).unwrap()
    }

    #[test]
    fn worked_counts() {
        // TP=5, FP=3, FN=2 on a 2x5 grid.
        let pred = mask(5, 2, &[1, 1, 1, 1, 1, 1, 1, 1, 0, 0]);
        let gt = mask(5, 2, &[1, 1, 1, 1, 1, 0, 0, 0, 1, 1]);
        let c = ConfusionCounts::from_masks(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 3, 2, 0));
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
        assert_eq!(c.total(), 10);
    }

    #[test]
    fn perfect_and_vacuous() {
        let m = mask(3, 1, &[0, 1, 1]);
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
        assert_eq!(fbiou(&m, &m).unwrap(), 1.0);
        let empty = BinaryMask::zeros(3, 1);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(iou(&m, &BinaryMask::zeros(2, 1)).is_err());
    }

    #[test]
    fn fbiou_is_the_mean() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 8 };
        assert_eq!(c.iou(), 0.6);
        assert_eq!(c.background_iou(), 0.8);
        assert!((c.fbiou() - 0.7).abs() < 1e-15);
        assert!((miou(&[0.6, 0.8]).unwrap() - 0.7).abs() < 1e-15);
        assert!(miou(&[]).is_err());
    }

    #[test]
    fn recall_cases() {
        let gt = BinaryRegion::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(region_recall(&gt, &gt).unwrap(), 1.0);
        let disjoint = BinaryRegion::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(region_recall(&disjoint, &gt).unwrap(), 0.0);
        let half = BinaryRegion::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        assert_eq!(region_recall(&half, &gt).unwrap(), 0.5);
        let empty = BinaryRegion::new(2, 2, vec![0; 4]).unwrap();
        assert!(region_recall(&gt, &empty).is_err());
    }
}
