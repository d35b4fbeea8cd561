use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CenterDataset;
use crate::error::{Error, Result};
use crate::Scalar;

/// A batch drawn from a single center: `center` indexes the center list and
/// `indices` its records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub center: usize,
    pub indices: Vec<usize>,
}

/// Endless stream of single-center batches.
///
/// Every epoch shuffles each center's records, chunks them (keeping a short
/// final chunk) and shuffles the resulting batch list, so batch counts per
/// center are proportional to center size.
#[derive(Debug, Clone)]
pub struct SingleSourceSampler {
    sizes: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: VecDeque<BatchPlan>,
    epoch: usize,
}

impl SingleSourceSampler {
    pub fn new(sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Data("sampler needs non-empty centers".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: VecDeque::new(),
            epoch: 0,
        })
    }

    /// Completed epochs (an epoch starts when its first batch is emitted).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sizes.iter().map(|s| s.div_ceil(self.batch_size)).sum()
    }

    /// The batches of the next epoch, in order.
    pub fn next_epoch(&mut self) -> Vec<BatchPlan> {
        let mut batches = Vec::new();
        for (c, &n) in self.sizes.iter().enumerate() {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(self.batch_size) {
                batches.push(BatchPlan { center: c, indices: chunk.to_vec() });
            }
        }
        batches.shuffle(&mut self.rng);
        self.epoch += 1;
        batches
    }
}

impl Iterator for SingleSourceSampler {
    type Item = BatchPlan;

    fn next(&mut self) -> Option<BatchPlan> {
        if self.pending.is_empty() {
            let e = self.next_epoch();
            self.pending.extend(e);
        }
        self.pending.pop_front()
    }
}

/// Sampler over the records of `datasets`.
pub fn single_source_batches<T: Scalar>(
    datasets: &[CenterDataset<T>],
    batch_size: usize,
    seed: u64,
) -> Result<SingleSourceSampler> {
    let sizes: Vec<usize> = datasets.iter().map(CenterDataset::len).collect();
    SingleSourceSampler::new(&sizes, batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_enumeration() {
        let mut s = SingleSourceSampler::new(&[4, 2], 2, 0).unwrap();
        let e = s.next_epoch();
        assert_eq!(e.len(), 3);
        assert_eq!(e.iter().filter(|b| b.center == 0).count(), 2);
        let mut seen: Vec<usize> = e.iter().filter(|b| b.center == 0).flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn short_final_chunk_is_kept() {
        let mut s = SingleSourceSampler::new(&[5], 2, 3).unwrap();
        let mut lens: Vec<usize> = s.next_epoch().iter().map(|b| b.indices.len()).collect();
        lens.sort_unstable();
        assert_eq!(lens, vec![1, 2, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SingleSourceSampler::new(&[3], 0, 0).is_err());
        assert!(SingleSourceSampler::new(&[3, 0], 1, 0).is_err());
        assert!(SingleSourceSampler::new(&[], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn every_epoch_covers_each_center_once(sizes in prop::collection::vec(1usize..20, 1..5), b in 1usize..6, seed: u64) {
            let mut s = SingleSourceSampler::new(&sizes, b, seed).unwrap();
            for _ in 0..2 {
                let e = s.next_epoch();
                prop_assert_eq!(e.len(), s.batches_per_epoch());
                for (c, &n) in sizes.iter().enumerate() {
                    let mut seen: Vec<usize> = e.iter().filter(|x| x.center == c).flat_map(|x| x.indices.clone()).collect();
                    seen.sort_unstable();
                    prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
                }
            }
        }
    }
}
