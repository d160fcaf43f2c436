use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSplit};

/// Which unlabeled samples a batch may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledPool {
    /// `U_in` and `U_out` together, proportional to their sizes.
    #[default]
    Pooled,
    /// `U_in` only.
    InOnly,
}

/// Indices of one training batch. `labeled` indexes `split.labeled`;
/// `unlabeled` indexes the pooled view [`DatasetSplit::unlabeled`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Batch {
    /// Labeled pairs formed by zipping the batch with its reverse.
    pub fn reversed_pairs(&self) -> Vec<(usize, usize)> {
        reversed_pairing(self.labeled.len()).into_iter().map(|(a, b)| (self.labeled[a], self.labeled[b])).collect()
    }
}

/// Positions `(i, n − 1 − i)` for `i in 0..n`. For odd `n` the middle
/// element pairs with itself.
pub fn reversed_pairing(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, n - 1 - i)).collect()
}

/// Draws `n` labeled and up to `mu·n` unlabeled samples, uniformly and
/// without replacement within the batch. When the pool holds fewer than
/// `mu·n` samples all of them are used (shuffled).
pub fn sample_batch<R: Rng + ?Sized>(
    split: &DatasetSplit,
    n: usize,
    mu: usize,
    pool: UnlabeledPool,
    rng: &mut R,
) -> Result<Batch, DataError> {
    if n < 2 || mu < 1 {
        return Err(DataError::Invalid(format!("batch needs n >= 2 and mu >= 1, got n = {n}, mu = {mu}")));
    }
    if n > split.labeled.len() {
        return Err(DataError::BatchTooLarge { requested: n, available: split.labeled.len() });
    }
    let labeled = index::sample(rng, split.labeled.len(), n).into_vec();
    let pool_len = match pool {
        UnlabeledPool::Pooled => split.unlabeled_len(),
        UnlabeledPool::InOnly => split.unlabeled_in.len(),
    };
    let unlabeled = index::sample(rng, pool_len, (mu * n).min(pool_len)).into_vec();
    Ok(Batch { labeled, unlabeled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn split() -> DatasetSplit {
        generate_synthetic(&GeneratorConfig::default()).unwrap().1
    }

    #[test]
    fn sizes() {
        let s = split();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&s, 2, 3, UnlabeledPool::Pooled, &mut rng).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (2, 6));
        let b = sample_batch(&s, 32, 10, UnlabeledPool::Pooled, &mut rng).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (32, 320));
        assert!(matches!(
            sample_batch(&s, s.labeled.len() + 1, 1, UnlabeledPool::Pooled, &mut rng),
            Err(DataError::BatchTooLarge { .. })
        ));
        assert!(sample_batch(&s, 1, 1, UnlabeledPool::Pooled, &mut rng).is_err());
    }

    #[test]
    fn in_only_never_touches_out() {
        let s = split();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = sample_batch(&s, 8, 4, UnlabeledPool::InOnly, &mut rng).unwrap();
            assert!(b.unlabeled.iter().all(|&u| u < s.unlabeled_in.len()));
        }
    }

    #[test]
    fn empty_pool_gives_empty_unlabeled_part() {
        let mut s = split();
        s.unlabeled_in.clear();
        s.unlabeled_out.clear();
        let b = sample_batch(&s, 4, 2, UnlabeledPool::Pooled, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.unlabeled.is_empty());
    }

    #[test]
    fn reversed_view() {
        let b = Batch { labeled: vec![10, 11, 12, 13], unlabeled: vec![] };
        assert_eq!(b.reversed_pairs(), vec![(10, 13), (11, 12), (12, 11), (13, 10)]);
        assert_eq!(reversed_pairing(3), vec![(0, 2), (1, 1), (2, 0)]);
    }

    #[test]
    fn coverage_of_every_pool_element() {
        // Each draw includes a given unlabeled sample with probability
        // 32/2305; missing one over 2000 draws has probability ~1e-12, so
        // with 2305 elements a miss anywhere is far below 1%.
        let s = split();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen_l = vec![false; s.labeled.len()];
        let mut seen_u = vec![false; s.unlabeled_len()];
        for _ in 0..2000 {
            let b = sample_batch(&s, 8, 4, UnlabeledPool::Pooled, &mut rng).unwrap();
            b.labeled.iter().for_each(|&i| seen_l[i] = true);
            b.unlabeled.iter().for_each(|&i| seen_u[i] = true);
        }
        assert!(seen_l.iter().all(|&x| x));
        assert!(seen_u.iter().all(|&x| x));
    }

    proptest! {
        #[test]
        fn no_repeats_within_a_batch(seed in any::<u64>(), n in 2usize..40, mu in 1usize..6) {
            let s = split();
            let b = sample_batch(&s, n, mu, UnlabeledPool::Pooled, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut l = b.labeled.clone();
            l.sort_unstable();
            l.dedup();
            prop_assert_eq!(l.len(), n);
            let mut u = b.unlabeled.clone();
            u.sort_unstable();
            u.dedup();
            prop_assert_eq!(u.len(), n * mu);
        }
    }
}
