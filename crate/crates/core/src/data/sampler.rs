use rand::Rng;

use super::InteractionSet;

/// Parallel lists of (user, positive item, negative item).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Sorted distinct items appearing as positives or negatives.
    pub fn distinct_items(&self) -> Vec<usize> {
        let mut items: Vec<usize> = self
            .positives
            .iter()
            .chain(&self.negatives)
            .copied()
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}

const USER_RETRIES: usize = 32;
const NEGATIVE_RETRIES: usize = 64;

/// Uniform BPR triples: `(a, i)` uniform over training interactions and `j`
/// uniform over the user's training non-positives.
///
/// `pairs` is [`InteractionSet::train_pairs`], passed in so callers can reuse it.
pub fn sample_bpr_triples<R: Rng>(
    set: &InteractionSet,
    pairs: &[(usize, usize)],
    batch_size: usize,
    rng: &mut R,
) -> TripleBatch {
    let n = set.num_items();
    let mut batch = TripleBatch {
        users: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
    };
    if pairs.is_empty() {
        return batch;
    }
    'slots: for _ in 0..batch_size {
        for _ in 0..USER_RETRIES {
            let (u, i) = pairs[rng.gen_range(0..pairs.len())];
            let positives = &set.train[u];
            if positives.len() >= n {
                continue;
            }
            let mut negative = None;
            for _ in 0..NEGATIVE_RETRIES {
                let j = rng.gen_range(0..n);
                if positives.binary_search(&j).is_err() {
                    negative = Some(j);
                    break;
                }
            }
            // Dense users: pick uniformly from the explicit complement.
            let j = negative.unwrap_or_else(|| {
                let k = rng.gen_range(0..n - positives.len());
                nth_non_positive(positives, k)
            });
            batch.users.push(u);
            batch.positives.push(i);
            batch.negatives.push(j);
            continue 'slots;
        }
        log::warn!("skipping a batch slot: sampled users have no negatives");
    }
    batch
}

/// The `k`-th item id (0-based) not present in the sorted list `positives`.
fn nth_non_positive(positives: &[usize], mut k: usize) -> usize {
    let mut candidate = 0;
    for &p in positives {
        let gap = p - candidate;
        if k < gap {
            return candidate + k;
        }
        k -= gap;
        candidate = p + 1;
    }
    candidate + k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng_for, Stream};

    fn set(train: Vec<Vec<usize>>, items: usize) -> InteractionSet {
        let m = train.len();
        InteractionSet {
            user_ids: (0..m).map(|u| format!("u{u}")).collect(),
            item_ids: (0..items).map(|i| format!("i{i}")).collect(),
            train,
            val: vec![vec![]; m],
            test: vec![vec![]; m],
        }
    }

    #[test]
    fn forced_case() {
        let s = set(vec![vec![0]], 2);
        let pairs = s.train_pairs();
        let mut rng = rng_for(1, Stream::Sampling);
        let b = sample_bpr_triples(&s, &pairs, 50, &mut rng);
        assert_eq!(b.len(), 50);
        assert!(b.users.iter().all(|&u| u == 0));
        assert!(b.positives.iter().all(|&i| i == 0));
        assert!(b.negatives.iter().all(|&j| j == 1));
    }

    #[test]
    fn saturated_user_is_skipped() {
        let s = set(vec![vec![0, 1], vec![0]], 2);
        let pairs = s.train_pairs();
        let mut rng = rng_for(1, Stream::Sampling);
        let b = sample_bpr_triples(&s, &pairs, 64, &mut rng);
        assert_eq!(b.len(), 64);
        assert!(b.users.iter().all(|&u| u == 1));
    }

    #[test]
    fn complement_indexing() {
        assert_eq!(nth_non_positive(&[0, 1, 3], 0), 2);
        assert_eq!(nth_non_positive(&[0, 1, 3], 1), 4);
        assert_eq!(nth_non_positive(&[], 5), 5);
        assert_eq!(nth_non_positive(&[2], 2), 3);
    }

    #[test]
    fn dense_user_negatives_come_from_complement() {
        let s = set(vec![(0..999).collect()], 1000);
        let pairs = s.train_pairs();
        let mut rng = rng_for(4, Stream::Sampling);
        let b = sample_bpr_triples(&s, &pairs, 20, &mut rng);
        assert!(b.negatives.iter().all(|&j| j == 999));
    }
}
