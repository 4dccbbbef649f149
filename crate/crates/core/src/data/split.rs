use super::{InteractionLog, ItemId, UserId, PAD};

/// Keeps the most recent `t` items, left-padding with [`PAD`] when shorter.
pub fn pad_or_truncate(seq: &[ItemId], t: usize) -> Vec<ItemId> {
    if seq.len() >= t {
        seq[seq.len() - t..].to_vec()
    } else {
        let mut out = vec![PAD; t - seq.len()];
        out.extend_from_slice(seq);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainWindow {
    pub user: UserId,
    pub input: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub input: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: UserId,
    /// Every item the user interacted with, sorted and deduplicated.
    pub history: Vec<ItemId>,
    /// Items visible during training (the training prefix), sorted and deduplicated.
    pub train_items: Vec<ItemId>,
    pub valid: EvalCase,
    pub test: EvalCase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub window: usize,
    pub item_count: usize,
    pub user_count: usize,
    pub users: Vec<UserSplit>,
    /// Training samples grouped by user, in user order.
    pub train: Vec<TrainWindow>,
    /// Users skipped because they had fewer than three interactions.
    pub excluded_users: usize,
}

impl SplitDataset {
    pub fn user(&self, user: UserId) -> Option<&UserSplit> {
        self.users
            .binary_search_by_key(&user, |u| u.user)
            .ok()
            .map(|i| &self.users[i])
    }
}

/// Last item → test, second-to-last → validation, the rest → training.
///
/// Training samples slide over the training prefix: every position `j`
/// yields (padded items before `j`, item `j`). Position 0 gives an
/// all-padding window, so the training targets together with the validation
/// and test targets partition the user's sequence.
pub fn leave_one_out_split(log: &InteractionLog, t: usize) -> SplitDataset {
    let mut users = Vec::new();
    let mut train = Vec::new();
    let mut excluded = 0;
    for (user, seq) in log.sequences().iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            excluded += 1;
            continue;
        }
        let prefix = &seq[..n - 2];
        for j in 0..prefix.len() {
            train.push(TrainWindow {
                user,
                input: pad_or_truncate(&prefix[..j], t),
                target: prefix[j],
            });
        }
        let mut history = seq.clone();
        history.sort_unstable();
        history.dedup();
        let mut train_items = prefix.to_vec();
        train_items.sort_unstable();
        train_items.dedup();
        users.push(UserSplit {
            user,
            history,
            train_items,
            valid: EvalCase {
                input: pad_or_truncate(prefix, t),
                target: seq[n - 2],
            },
            test: EvalCase {
                input: pad_or_truncate(&seq[..n - 1], t),
                target: seq[n - 1],
            },
        });
    }
    SplitDataset {
        window: t,
        item_count: log.item_count(),
        user_count: log.user_count(),
        users,
        train,
        excluded_users: excluded,
    }
}
