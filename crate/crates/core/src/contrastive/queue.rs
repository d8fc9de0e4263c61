use crate::nn::{l2_norm, Real};
use crate::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-5;

/// Fixed-capacity FIFO ring of unit-norm keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue<T = f32> {
    capacity: usize,
    dim: usize,
    storage: Vec<T>,
    /// Slot of the oldest entry.
    head: usize,
    fill: usize,
}

impl<T: Real> EmbeddingQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue capacity and dim must be positive");
        Self { capacity, dim, storage: vec![T::zero(); capacity * dim], head: 0, fill: 0 }
    }

    /// Restores a queue from its raw parts (oldest entry at slot `head`).
    pub fn from_parts(capacity: usize, dim: usize, storage: Vec<T>, head: usize, fill: usize) -> Result<Self> {
        if storage.len() != capacity * dim || head >= capacity.max(1) || fill > capacity {
            return Err(Error::ShapeMismatch("inconsistent queue parts".into()));
        }
        Ok(Self { capacity, dim, storage, head, fill })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn storage(&self) -> &[T] {
        &self.storage
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.fill).map(move |i| {
            let slot = (self.head + i) % self.capacity;
            &self.storage[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Appends keys; when full, the oldest entries are overwritten first.
    /// Nothing is written if any key is not unit norm.
    pub fn enqueue<V: AsRef<[T]>>(&mut self, keys: &[V]) -> Result<()> {
        for k in keys {
            let k = k.as_ref();
            if k.len() != self.dim {
                return Err(Error::ShapeMismatch(format!("key of dim {} for a queue of dim {}", k.len(), self.dim)));
            }
            let norm = l2_norm(k).to_f64().unwrap_or(f64::NAN);
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(Error::NotNormalized { norm: norm as f32 });
            }
        }
        for k in keys {
            let slot = (self.head + self.fill) % self.capacity;
            self.storage[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k.as_ref());
            if self.fill < self.capacity {
                self.fill += 1;
            } else {
                self.head = (self.head + 1) % self.capacity;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use proptest::prelude::*;

    use super::*;

    fn key(i: usize) -> Vec<f32> {
        let a = i as f32 * 0.1;
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn fifo_eviction_by_batches() {
        let mut q = EmbeddingQueue::<f32>::new(8, 2);
        let batches: Vec<Vec<Vec<f32>>> = (0..3).map(|b| (0..4).map(|i| key(b * 4 + i)).collect()).collect();
        q.enqueue(&batches[0]).unwrap();
        assert_eq!(q.len(), 4);
        q.enqueue(&batches[1]).unwrap();
        q.enqueue(&batches[2]).unwrap();
        let held: Vec<Vec<f32>> = q.iter().map(<[f32]>::to_vec).collect();
        assert_eq!(held, [batches[1].clone(), batches[2].clone()].concat());
    }

    #[test]
    fn rejects_unnormalised_keys_atomically() {
        let mut q = EmbeddingQueue::<f32>::new(4, 2);
        let err = q.enqueue(&[key(0), vec![2.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { .. }));
        assert!(q.is_empty());
    }

    #[test]
    fn separate_queues_do_not_share_entries() {
        let mut global = EmbeddingQueue::<f32>::new(4, 2);
        let mut local = EmbeddingQueue::<f32>::new(4, 2);
        global.enqueue(&[key(1)]).unwrap();
        local.enqueue(&[key(2), key(3)]).unwrap();
        assert_eq!(global.len(), 1);
        assert_eq!(global.iter().next().unwrap(), key(1).as_slice());
        assert!(local.iter().all(|k| k != key(1).as_slice()));
    }

    proptest! {
        #[test]
        fn matches_reference_list_model(capacity in 1usize..10, batches in proptest::collection::vec(0usize..7, 0..12)) {
            let mut q = EmbeddingQueue::<f32>::new(capacity, 2);
            let mut model: VecDeque<Vec<f32>> = VecDeque::new();
            let mut next = 0;
            let mut total = 0;
            for size in batches {
                let batch: Vec<Vec<f32>> = (0..size).map(|i| key(next + i)).collect();
                next += size;
                total += size;
                q.enqueue(&batch).unwrap();
                for k in batch {
                    model.push_back(k);
                    if model.len() > capacity {
                        model.pop_front();
                    }
                }
                prop_assert_eq!(q.len(), total.min(capacity));
                let held: Vec<Vec<f32>> = q.iter().map(<[f32]>::to_vec).collect();
                prop_assert_eq!(held, model.iter().cloned().collect::<Vec<_>>());
            }
        }
    }
}
