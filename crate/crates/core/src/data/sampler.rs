use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, SyntheticSlide};
use crate::autodiff::Tensor;

/// Draws `m` tiles from `slide`: without replacement when the slide has at
/// least `m` tiles, otherwise uniformly with replacement. Returns the
/// `m × D` tile matrix and the source row of every sampled tile.
pub fn sample_tiles(
    slide: &SyntheticSlide,
    m: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>), DataError> {
    let t = slide.n_tiles();
    if t == 0 {
        return Err(DataError::EmptySlide(slide.id));
    }
    if m == 0 {
        return Err(DataError::EmptySample);
    }
    let idx: Vec<usize> = if t >= m {
        index::sample(rng, t, m).into_vec()
    } else {
        (0..m).map(|_| rng.random_range(0..t)).collect()
    };
    let d = slide.tiles.cols();
    let mut data = Vec::with_capacity(m * d);
    for &i in &idx {
        data.extend_from_slice(slide.tiles.row(i));
    }
    Ok((Tensor::new(&[m, d], data).expect("sized"), idx))
}

/// Contiguous chunking: rank `i + 1` receives rows `[i·K, (i+1)·K)`.
pub fn assign_to_ranks(tiles: &Tensor, n: usize, k: usize) -> Result<Vec<Tensor>, DataError> {
    let m = tiles.rows();
    if n == 0 || k == 0 || m != n * k || tiles.rank() != 2 {
        return Err(DataError::AssignMismatch { m, n, k });
    }
    Ok((0..n)
        .map(|i| tiles.slice_rows(i * k, k).expect("in range"))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

/// Monte Carlo cross-validation plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<Split>,
    pub n_splits: usize,
    pub train_frac: f64,
}

/// `n_splits` independent random partitions with `round(train_frac·n)`
/// training ids each.
pub fn mccv_splits(ids: &[u64], n_splits: usize, train_frac: f64, seed: u64) -> Result<SplitPlan, DataError> {
    if ids.is_empty() {
        return Err(DataError::EmptyIds);
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::InvalidFraction(train_frac));
    }
    if n_splits == 0 {
        return Err(DataError::NoSplits);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (train_frac * ids.len() as f64).round() as usize;
    let splits = (0..n_splits)
        .map(|_| {
            let mut shuffled = ids.to_vec();
            shuffled.shuffle(&mut rng);
            let val = shuffled.split_off(n_train);
            Split { train: shuffled, val }
        })
        .collect();
    Ok(SplitPlan {
        splits,
        n_splits,
        train_frac,
    })
}

/// Uniform random subset of `round(fraction·n)` ids (at least one when
/// `ids` is non-empty), in random order.
pub fn epoch_subsample(ids: &[u64], fraction: f64, rng: &mut impl Rng) -> Result<Vec<u64>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let n = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
    Ok(index::sample(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn slide(t: usize, d: usize) -> SyntheticSlide {
        SyntheticSlide {
            id: 0,
            tiles: Tensor::new(&[t, d], (0..t * d).map(|v| v as f64).collect()).unwrap(),
            label: 0,
            witness: vec![false; t],
        }
    }

    #[test]
    fn sample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, idx) = sample_tiles(&slide(10, 2), 4, &mut rng).unwrap();
        assert_eq!(x.shape(), &[4, 2]);
        assert_eq!(idx.iter().collect::<HashSet<_>>().len(), 4);

        let (x, idx) = sample_tiles(&slide(5, 3), 8, &mut rng).unwrap();
        assert_eq!(x.rows(), 8);
        assert!(idx.iter().all(|&i| i < 5));
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(x.row(r), slide(5, 3).tiles.row(i));
        }

        let a = sample_tiles(&slide(50, 1), 7, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_tiles(&slide(50, 1), 7, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);

        assert!(matches!(sample_tiles(&slide(0, 2), 1, &mut rng), Err(DataError::EmptySlide(0))));
        assert!(matches!(sample_tiles(&slide(3, 2), 0, &mut rng), Err(DataError::EmptySample)));
    }

    #[test]
    fn assign_examples() {
        let x = slide(6, 2).tiles;
        let parts = assign_to_ranks(&x, 3, 2).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parts[2].data(), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(assign_to_ranks(&x, 1, 6).unwrap(), vec![x.clone()]);
        let seven = slide(7, 2).tiles;
        assert!(matches!(
            assign_to_ranks(&seven, 3, 2),
            Err(DataError::AssignMismatch { m: 7, n: 3, k: 2 })
        ));
    }

    #[test]
    fn mccv_examples() {
        let ids: Vec<u64> = (0..100).collect();
        let plan = mccv_splits(&ids, 20, 0.8, 4).unwrap();
        assert_eq!(plan.splits.len(), 20);
        for s in &plan.splits {
            assert_eq!((s.train.len(), s.val.len()), (80, 20));
            let mut all: Vec<u64> = s.train.iter().chain(&s.val).copied().collect();
            all.sort_unstable();
            assert_eq!(all, ids);
        }
        assert_eq!(plan, mccv_splits(&ids, 20, 0.8, 4).unwrap());
        assert!(matches!(mccv_splits(&[], 5, 0.8, 0), Err(DataError::EmptyIds)));
        assert!(mccv_splits(&ids, 5, 1.0, 0).is_err());
        assert!(mccv_splits(&ids, 0, 0.5, 0).is_err());
    }

    #[test]
    fn mccv_validation_coverage() {
        // P(id in some validation set) = 1 − 0.8^20 ≈ 0.9885 per id.
        let ids: Vec<u64> = (0..100).collect();
        let mut covered = 0usize;
        let trials = 200;
        for seed in 0..trials {
            let plan = mccv_splits(&ids, 20, 0.8, seed).unwrap();
            let seen: HashSet<u64> = plan.splits.iter().flat_map(|s| s.val.iter().copied()).collect();
            covered += seen.len();
        }
        let rate = covered as f64 / (trials as f64 * 100.0);
        assert!(rate >= 0.98, "{rate}");
    }

    #[test]
    fn subsample_examples() {
        let ids: Vec<u64> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut full = epoch_subsample(&ids, 1.0, &mut rng).unwrap();
        full.sort_unstable();
        assert_eq!(full, ids);
        assert_eq!(epoch_subsample(&ids, 0.5, &mut rng).unwrap().len(), 5);
        assert!(epoch_subsample(&ids, 0.0, &mut rng).is_err());

        // 1/C(10,5) = 1/252 chance of a repeat per pair of epochs
        let mut same = 0;
        for _ in 0..200 {
            let mut a = epoch_subsample(&ids, 0.5, &mut rng).unwrap();
            let mut b = epoch_subsample(&ids, 0.5, &mut rng).unwrap();
            a.sort_unstable();
            b.sort_unstable();
            same += usize::from(a == b);
        }
        assert!(same <= 6, "{same}");
    }

    proptest! {
        #[test]
        fn sampler_laws(t in 1usize..40, m in 1usize..60, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, idx) = sample_tiles(&slide(t, 2), m, &mut rng).unwrap();
            prop_assert_eq!(idx.len(), m);
            prop_assert!(idx.iter().all(|&i| i < t));
            if t >= m {
                prop_assert_eq!(idx.iter().collect::<HashSet<_>>().len(), m);
            }
            prop_assert_eq!(x.rows(), m);
        }

        #[test]
        fn assign_concat_roundtrip(n in 1usize..6, k in 1usize..6, d in 1usize..4) {
            let x = slide(n * k, d).tiles;
            let parts = assign_to_ranks(&x, n, k).unwrap();
            let joined: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
            prop_assert_eq!(joined.as_slice(), x.data());
        }
    }
}
