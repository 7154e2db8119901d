use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_BANK_CAPACITY: usize = 2560;

/// A feature vector paired with the class distribution attached to it
/// (one-hot for labels and pseudo-labels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub feature: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Fixed-capacity FIFO of context records. Oldest records are evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    feature_dim: usize,
    num_classes: usize,
    records: VecDeque<BankRecord>,
    pushed: u64,
    evicted: u64,
}

impl MemoryBank {
    /// A bank holding a single random record: a standard-normal feature with
    /// a uniform class distribution.
    pub fn init(capacity: usize, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || feature_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidParameter(
                "memory bank capacity and dimensions must be positive".into(),
            ));
        }
        let mut r = rng::rng(seed);
        let feature = (0..feature_dim).map(|_| r.sample(StandardNormal)).collect();
        let probs = vec![1.0 / num_classes as f64; num_classes];
        let mut records = VecDeque::with_capacity(capacity.min(4096));
        records.push_back(BankRecord { feature, probs });
        Ok(MemoryBank {
            capacity,
            feature_dim,
            num_classes,
            records,
            pushed: 1,
            evicted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in insertion order, oldest first.
    pub fn records(&self) -> impl ExactSizeIterator<Item = &BankRecord> {
        self.records.iter()
    }

    /// Total records ever inserted, including the initial one.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn total_evicted(&self) -> u64 {
        self.evicted
    }

    /// Appends `records` in order, evicting the oldest entries once full.
    /// Returns the number of evicted records. Nothing is inserted if any
    /// record has the wrong shape.
    pub fn push<I>(&mut self, records: I) -> Result<usize>
    where
        I: IntoIterator<Item = BankRecord>,
    {
        let incoming: Vec<BankRecord> = records.into_iter().collect();
        for r in &incoming {
            if r.feature.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    context: "memory bank feature",
                    expected: self.feature_dim,
                    found: r.feature.len(),
                });
            }
            if r.probs.len() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    context: "memory bank class distribution",
                    expected: self.num_classes,
                    found: r.probs.len(),
                });
            }
        }
        let mut evicted = 0;
        for r in incoming {
            if self.records.len() == self.capacity {
                self.records.pop_front();
                evicted += 1;
            }
            self.records.push_back(r);
            self.pushed += 1;
        }
        self.evicted += evicted as u64;
        Ok(evicted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize) -> BankRecord {
        BankRecord {
            feature: vec![i as f64, 0.0],
            probs: vec![1.0, 0.0],
        }
    }

    #[test]
    fn fresh_bank() {
        let b = MemoryBank::init(DEFAULT_BANK_CAPACITY, 4, 3, 9).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.capacity(), 2560);
        assert_eq!(b, MemoryBank::init(DEFAULT_BANK_CAPACITY, 4, 3, 9).unwrap());
        assert_ne!(b, MemoryBank::init(DEFAULT_BANK_CAPACITY, 4, 3, 10).unwrap());
    }

    #[test]
    fn fifo_eviction() {
        let q = 5;
        let mut b = MemoryBank::init(q, 2, 2, 0).unwrap();
        let initial = b.records().next().unwrap().clone();
        // Fill to capacity exactly: the random record is still present.
        assert_eq!(b.push((0..q - 1).map(rec)).unwrap(), 0);
        assert_eq!(b.len(), q);
        // Q + 1 user records in total evict the initial one and record 0.
        assert_eq!(b.push((q - 1..q + 1).map(rec)).unwrap(), 2);
        assert_eq!(b.len(), q);
        assert!(b.records().all(|r| *r != initial));
        let order: Vec<f64> = b.records().map(|r| r.feature[0]).collect();
        assert_eq!(order, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(b.total_pushed() - b.total_evicted(), b.len() as u64);
    }

    #[test]
    fn empty_push_is_noop() {
        let mut b = MemoryBank::init(3, 2, 2, 0).unwrap();
        let before = b.clone();
        assert_eq!(b.push(Vec::new()).unwrap(), 0);
        assert_eq!(b, before);
    }

    #[test]
    fn wrong_dimension_rejected_atomically() {
        let mut b = MemoryBank::init(3, 2, 2, 0).unwrap();
        let bad = BankRecord {
            feature: vec![0.0; 3],
            probs: vec![1.0, 0.0],
        };
        assert!(b.push(vec![rec(1), bad]).is_err());
        assert_eq!(b.len(), 1);
    }
}
