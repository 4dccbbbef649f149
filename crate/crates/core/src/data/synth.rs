use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, InteractionLog, ItemId};

/// Planted multi-interest click generator.
///
/// Each user draws an order over the interest pools; while `k` interests are
/// scheduled active, the first `k` pools of that order are active. Each click
/// stays on the previous interest with probability `stickiness` (if it is
/// still active), otherwise picks an active interest uniformly; the item is
/// uniform within the interest's pool. With probability `noise` the click is
/// instead uniform over the whole catalogue and carries no interest label.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    /// Disjoint item pools, one per latent interest.
    pub pools: Vec<Vec<ItemId>>,
    /// `(start position, active count)` steps, sorted by position, starting at 0.
    pub schedule: Vec<(usize, usize)>,
    pub seq_len: usize,
    pub stickiness: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `interests` contiguous pools of `items_per_interest` ids starting at 1,
    /// with a constant number of active interests.
    pub fn contiguous(
        users: usize,
        interests: usize,
        items_per_interest: usize,
        active: usize,
        seq_len: usize,
        seed: u64,
    ) -> Self {
        let pools = (0..interests)
            .map(|p| (p * items_per_interest + 1..=(p + 1) * items_per_interest).collect())
            .collect();
        SyntheticSpec {
            users,
            pools,
            schedule: vec![(0, active)],
            seq_len,
            stickiness: 0.0,
            noise: 0.0,
            seed,
        }
    }

    pub fn item_count(&self) -> usize {
        self.pools.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Scheduled active count at `position`.
    pub fn active_at(&self, position: usize) -> usize {
        self.schedule
            .iter()
            .take_while(|(start, _)| *start <= position)
            .last()
            .map(|&(_, c)| c)
            .unwrap_or(0)
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Synthetic(m.to_string()));
        if self.pools.is_empty() || self.pools.iter().any(Vec::is_empty) {
            return bad("every interest needs a non-empty pool");
        }
        let mut all: Vec<ItemId> = self.pools.iter().flatten().copied().collect();
        if all.contains(&0) {
            return bad("item id 0 is reserved for padding");
        }
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        if all.len() != n {
            return bad("interest pools overlap");
        }
        if self.schedule.first().map(|s| s.0) != Some(0) {
            return bad("schedule must start at position 0");
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("schedule positions must increase");
        }
        if self
            .schedule
            .iter()
            .any(|&(_, c)| c == 0 || c > self.pools.len())
        {
            return bad("active counts must lie in 1..=number of pools");
        }
        if self.seq_len < 3 {
            return bad("sequences need at least three clicks");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.stickiness) {
            return bad("noise and stickiness must be probabilities");
        }
        Ok(())
    }
}

/// Ground truth for one click.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClickLabel {
    /// Pool index of the planted interest; `None` for a noise click.
    pub interest: Option<usize>,
    /// Number of scheduled active interests at this position.
    pub active_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub log: InteractionLog,
    /// `labels[user][position]`
    pub labels: Vec<Vec<ClickLabel>>,
}

impl SyntheticData {
    /// Sidecar lines: `user position interest_label active_count`, with
    /// `-1` marking noise clicks. Users are 1-based as in the log text.
    pub fn labels_text(&self) -> String {
        let mut out = String::new();
        for (u, labels) in self.labels.iter().enumerate() {
            for (pos, l) in labels.iter().enumerate() {
                let interest = l.interest.map(|i| i as i64).unwrap_or(-1);
                let _ = writeln!(out, "{}\t{}\t{}\t{}", u + 1, pos, interest, l.active_count);
            }
        }
        out
    }

    /// Label of an item id, recovered from its pool.
    pub fn pool_of(spec: &SyntheticSpec, item: ItemId) -> Option<usize> {
        spec.pools.iter().position(|p| p.contains(&item))
    }
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let item_count = spec.item_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = Vec::with_capacity(spec.users);
    let mut labels = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let mut order: Vec<usize> = (0..spec.pools.len()).collect();
        order.shuffle(&mut rng);
        let mut seq = Vec::with_capacity(spec.seq_len);
        let mut lab = Vec::with_capacity(spec.seq_len);
        let mut current: Option<usize> = None;
        for pos in 0..spec.seq_len {
            let active = spec.active_at(pos);
            let active_set = &order[..active];
            if spec.noise > 0.0 && rng.gen::<f64>() < spec.noise {
                seq.push(rng.gen_range(1..=item_count));
                lab.push(ClickLabel {
                    interest: None,
                    active_count: active,
                });
                continue;
            }
            let stay = current
                .filter(|c| active_set.contains(c))
                .filter(|_| spec.stickiness > 0.0 && rng.gen::<f64>() < spec.stickiness);
            let interest = match stay {
                Some(c) => c,
                None => active_set[rng.gen_range(0..active)],
            };
            current = Some(interest);
            let pool = &spec.pools[interest];
            seq.push(pool[rng.gen_range(0..pool.len())]);
            lab.push(ClickLabel {
                interest: Some(interest),
                active_count: active,
            });
        }
        sequences.push(seq);
        labels.push(lab);
    }
    Ok(SyntheticData {
        log: InteractionLog::from_sequences(sequences, item_count),
        labels,
    })
}
