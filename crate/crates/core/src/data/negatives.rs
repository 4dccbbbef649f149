use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, ItemId, UserId, PAD};

/// Draws `o` distinct items uniformly from `1..=item_count` minus `positives`
/// (sorted) and `target`. Deterministic in `seed`.
pub fn sample_negatives(
    user: UserId,
    item_count: usize,
    positives: &[ItemId],
    target: ItemId,
    o: usize,
    seed: u64,
) -> Result<Vec<ItemId>, DataError> {
    let excluded = |i: ItemId| i == PAD || i == target || positives.binary_search(&i).is_ok();
    let blocked = positives.iter().filter(|&&i| i >= 1 && i <= item_count).count()
        + usize::from(target >= 1 && target <= item_count && positives.binary_search(&target).is_err());
    let eligible = item_count.saturating_sub(blocked);
    if eligible < o {
        return Err(DataError::NotEnoughNegatives {
            user,
            eligible,
            wanted: o,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if eligible <= 4 * o {
        let mut pool: Vec<ItemId> = (1..=item_count).filter(|&i| !excluded(i)).collect();
        let (picked, _) = pool.partial_shuffle(&mut rng, o);
        return Ok(picked.to_vec());
    }
    let mut seen = HashSet::with_capacity(o);
    let mut out = Vec::with_capacity(o);
    while out.len() < o {
        let i = rng.gen_range(1..=item_count);
        if !excluded(i) && seen.insert(i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Every item in `1..=item_count` outside `history`, plus nothing else.
pub fn non_interacted(item_count: usize, history: &[ItemId]) -> Vec<ItemId> {
    (1..=item_count)
        .filter(|i| history.binary_search(i).is_err())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_candidate() {
        assert_eq!(sample_negatives(0, 5, &[1, 2, 3], 4, 1, 9).unwrap(), vec![5]);
    }

    #[test]
    fn ninety_nine_distinct_non_interacted() {
        let positives: Vec<ItemId> = (1..=1682).step_by(7).collect();
        let s = sample_negatives(3, 1682, &positives, 2, 99, 42).unwrap();
        assert_eq!(s.len(), 99);
        let set: HashSet<_> = s.iter().collect();
        assert_eq!(set.len(), 99);
        assert!(s.iter().all(|i| positives.binary_search(i).is_err() && *i != 2 && *i != 0));
    }

    #[test]
    fn seeded_draw_is_repeatable() {
        let a = sample_negatives(0, 500, &[1, 2], 3, 20, 7).unwrap();
        let b = sample_negatives(0, 500, &[1, 2], 3, 20, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_candidates() {
        let err = sample_negatives(4, 5, &[1, 2, 3], 4, 2, 0).unwrap_err();
        assert!(matches!(err, DataError::NotEnoughNegatives { user: 4, eligible: 1, wanted: 2 }));
    }

    proptest! {
        #[test]
        fn never_hits_positives(
            mut positives in proptest::collection::vec(1usize..60, 0..30),
            target in 1usize..60,
            o in 1usize..10,
            seed in any::<u64>(),
        ) {
            positives.sort_unstable();
            positives.dedup();
            if let Ok(s) = sample_negatives(0, 60, &positives, target, o, seed) {
                prop_assert_eq!(s.len(), o);
                let set: HashSet<_> = s.iter().collect();
                prop_assert_eq!(set.len(), o);
                for i in s {
                    prop_assert!(i != target && i != PAD && positives.binary_search(&i).is_err());
                }
            }
        }
    }
}
