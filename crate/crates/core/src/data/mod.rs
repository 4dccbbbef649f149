//! Interaction logs, leave-one-out splitting and sampling.

mod log;
mod negatives;
mod split;
mod synth;

pub use log::{load_interactions, parse_interactions, FilterConfig, InteractionLog, LogFormat, RawStats};
pub use negatives::{non_interacted, sample_negatives};
pub use split::{leave_one_out_split, pad_or_truncate, EvalCase, SplitDataset, TrainWindow, UserSplit};
pub use synth::{synth_generate, ClickLabel, SyntheticData, SyntheticSpec};

/// Dense item id. `0` is the padding item; real items are `1..=m`.
pub type ItemId = usize;
/// Dense user index `0..n`.
pub type UserId = usize;

pub const PAD: ItemId = 0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no interactions left after filtering (min per user {min_user}, min per item {min_item})")]
    EmptyAfterFilter { min_user: usize, min_item: usize },
    #[error("only {eligible} eligible negatives for user {user}, need {wanted}")]
    NotEnoughNegatives {
        user: UserId,
        eligible: usize,
        wanted: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
    #[error("unknown log format `{0}` (expected `uirt` or `uit`)")]
    UnknownFormat(String),
}
