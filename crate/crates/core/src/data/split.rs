use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CenterDataset, Split};
use crate::error::{Error, Result};
use crate::util::derive_seed;
use crate::Scalar;

pub const DEFAULT_SPLIT_FRACTION: f64 = 0.8;

/// Seeded partition of `0..n` into `round(fraction * n)` and the rest, both
/// sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} records")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let k = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut a, mut b) = (idx[..k].to_vec(), idx[k..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Splits a center into train/val and test parts, tagging each record.
pub fn split<T: Scalar>(dataset: &CenterDataset<T>, fraction: f64, seed: u64) -> Result<(CenterDataset<T>, CenterDataset<T>)> {
    let (tv, te) = split_indices(dataset.len(), fraction, derive_seed(seed, &dataset.center_id))?;
    let take = |idx: &[usize], split: Split| CenterDataset {
        center_id: dataset.center_id.clone(),
        availability: dataset.availability,
        records: idx
            .iter()
            .map(|&i| {
                let mut r = dataset.records[i].clone();
                r.split = split;
                r
            })
            .collect(),
    };
    Ok((take(&tv, Split::TrainVal), take(&te, Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let (a, b) = split_indices(10, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 1).unwrap(), (a, b));
        let (a, b) = split_indices(246, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (197, 49));
        assert!(split_indices(1, 0.8, 0).is_err());
        assert!(split_indices(0, 0.8, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exact(n in 2usize..400, f in 0.05f64..0.95, seed: u64) {
            let (a, b) = split_indices(n, f, seed).unwrap();
            prop_assert_eq!(a.len(), (f * n as f64).round() as usize);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
