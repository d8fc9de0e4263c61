use serde::{Deserialize, Serialize};

use super::EmbeddingQueue;
use crate::nn::{dot, Real};
use crate::{Error, Result};

/// Loss value and exact gradients of one InfoNCE term.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce<T> {
    pub loss: T,
    pub grad_q: Vec<T>,
    pub grad_k_pos: Vec<T>,
    /// `q · k+`.
    pub positive_similarity: T,
    /// Mean `q · k_i` over the queue.
    pub negative_similarity: T,
}

/// `-log(exp(q·k+/τ) / (exp(q·k+/τ) + Σ_i exp(q·k_i/τ)))` over the queued
/// negatives. Queue entries are constants.
pub fn info_nce<T: Real>(q: &[T], k_pos: &[T], queue: &EmbeddingQueue<T>, tau: T) -> Result<InfoNce<T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("tau", "temperature must be positive"));
    }
    if queue.is_empty() {
        return Err(Error::EmptyQueue);
    }
    if q.len() != k_pos.len() || q.len() != queue.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {}, positive dim {}, queue dim {}",
            q.len(),
            k_pos.len(),
            queue.dim()
        )));
    }
    let pos_sim = dot(q, k_pos);
    let neg_sims: Vec<T> = queue.iter().map(|k| dot(q, k)).collect();

    // Stable log-sum-exp over [positive, negatives].
    let pos_logit = pos_sim / tau;
    let max = neg_sims.iter().fold(pos_logit, |m, &s| m.max(s / tau));
    let pos_exp = (pos_logit - max).exp();
    let neg_exps: Vec<T> = neg_sims.iter().map(|&s| (s / tau - max).exp()).collect();
    let total = pos_exp + neg_exps.iter().copied().sum::<T>();
    let loss = (max + total.ln() - pos_logit).max(T::zero());

    // dL/dq = ((p+ - 1) k+ + Σ p_i k_i) / τ,  dL/dk+ = (p+ - 1) q / τ
    let p_pos = pos_exp / total;
    let mut grad_q: Vec<T> = k_pos.iter().map(|&k| (p_pos - T::one()) * k).collect();
    for (k, &e) in queue.iter().zip(&neg_exps) {
        let p = e / total;
        for (g, &kv) in grad_q.iter_mut().zip(k) {
            *g += p * kv;
        }
    }
    grad_q.iter_mut().for_each(|g| *g = *g / tau);
    let grad_k_pos = q.iter().map(|&v| (p_pos - T::one()) * v / tau).collect();

    let n = T::from_usize(neg_sims.len()).expect("queue length");
    Ok(InfoNce {
        loss,
        grad_q,
        grad_k_pos,
        positive_similarity: pos_sim,
        negative_similarity: neg_sims.iter().copied().sum::<T>() / n,
    })
}

/// The local term has the same form as the global one, applied to patch
/// embeddings and the patch queue.
pub fn local_info_nce<T: Real>(
    q_patch: &[T],
    k_patch_pos: &[T],
    patch_queue: &EmbeddingQueue<T>,
    tau: T,
) -> Result<InfoNce<T>> {
    info_nce(q_patch, k_patch_pos, patch_queue, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub global: f32,
    pub local: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { global: 1.0, local: 1.0 }
    }
}

pub fn combined_loss<T: Real>(global: T, local: T, weights: LossWeights) -> T {
    T::lit(weights.global as f64) * global + T::lit(weights.local as f64) * local
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn queue_of(entries: &[Vec<f64>]) -> EmbeddingQueue<f64> {
        let mut q = EmbeddingQueue::new(entries.len().max(1), entries[0].len());
        q.enqueue(entries).unwrap();
        q
    }

    #[test]
    fn uniform_logits_give_log_four() {
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let pos = vec![0.0, 1.0, 0.0, 0.0];
        let queue = queue_of(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0, 0.0]]);
        let out = info_nce(&q, &pos, &queue, 1.0).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_negative_case() {
        let q = vec![1.0, 0.0];
        let queue = queue_of(&[vec![0.0, 1.0]]);
        let out = info_nce(&q, &q, &queue, 1.0).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn small_temperature_drives_loss_to_zero() {
        let q = vec![1.0, 0.0, 0.0];
        let queue = queue_of(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = info_nce(&q, &q, &queue, 0.01).unwrap();
        assert!(out.loss < 1e-30);
        assert!(out.loss.is_finite());
        for tau in [1.0, 0.5, 0.1] {
            let out = local_info_nce(&q, &q, &queue, tau).unwrap();
            assert!(out.loss < 2f64.ln());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let q = vec![1.0, 0.0];
        let queue = queue_of(&[vec![0.0, 1.0]]);
        assert!(info_nce(&q, &q, &queue, 0.0).is_err());
        assert!(matches!(info_nce(&q, &q, &EmbeddingQueue::new(4, 2), 1.0), Err(Error::EmptyQueue)));
    }

    #[test]
    fn combined_loss_weights() {
        assert!((combined_loss(0.5f64, 0.7, LossWeights::default()) - 1.2).abs() < 1e-12);
        assert_eq!(combined_loss(0.5f64, 0.7, LossWeights { global: 1.0, local: 0.0 }), 0.5);
        assert!((combined_loss(0.5f64, 0.7, LossWeights { global: 2.0, local: 1.0 }) - 1.7).abs() < 1e-12);
    }

    fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.to_vec();
                let mut minus = x.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            raw in proptest::collection::vec(-1.0f64..1.0, 5 * 4),
            tau in 0.1f64..2.0,
        ) {
            let dim = 4;
            let q: Vec<f64> = raw[..dim].to_vec();
            let k: Vec<f64> = raw[dim..2 * dim].to_vec();
            let negatives: Vec<Vec<f64>> = raw[2 * dim..].chunks(dim).map(unit).filter(|v| v.iter().all(|x| x.is_finite())).collect();
            prop_assume!(!negatives.is_empty());
            let queue = queue_of(&negatives);
            let out = info_nce(&q, &k, &queue, tau).unwrap();
            let fd_q = finite_difference(|x| info_nce(x, &k, &queue, tau).unwrap().loss, &q, 1e-6);
            let fd_k = finite_difference(|x| info_nce(&q, x, &queue, tau).unwrap().loss, &k, 1e-6);
            for (a, n) in out.grad_q.iter().zip(&fd_q).chain(out.grad_k_pos.iter().zip(&fd_k)) {
                prop_assert!((a - n).abs() <= 1e-6 * (1.0 + a.abs().max(n.abs())), "{a} vs {n}");
            }
        }

        #[test]
        fn permutation_invariant_and_monotone_in_positive(
            angles in proptest::collection::vec(0.0f64..std::f64::consts::TAU, 2..8),
            shift in 0.01f64..0.5,
        ) {
            let negatives: Vec<Vec<f64>> = angles.iter().map(|a| vec![a.cos(), a.sin(), 0.0]).collect();
            let q = vec![1.0, 0.0, 0.0];
            let k = unit(&[0.2, 0.0, 1.0]);
            let mut reversed = negatives.clone();
            reversed.reverse();
            let a = info_nce(&q, &k, &queue_of(&negatives), 0.5).unwrap().loss;
            let b = info_nce(&q, &k, &queue_of(&reversed), 0.5).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
            // Raising q·k+ with negatives fixed lowers the loss.
            let closer = unit(&[0.2 + shift, 0.0, 1.0]);
            prop_assert!(info_nce(&q, &closer, &queue_of(&negatives), 0.5).unwrap().loss < a);
        }
    }
}
