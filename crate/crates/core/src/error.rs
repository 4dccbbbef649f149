use crate::data::{DataError, ItemId};
use crate::diff::archive::ArchiveError;
use crate::diff::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("config: {0}")]
    Config(String),
    #[error("item id {id} out of range (catalogue has {items} items)")]
    ItemOutOfRange { id: ItemId, items: usize },
    #[error("user {user} out of range ({users} users)")]
    UserOutOfRange { user: usize, users: usize },
    #[error("window has length {got}, model expects {expected}")]
    WindowLength { got: usize, expected: usize },
    #[error("interest count must be in 1..={k}, got {h}")]
    InterestCount { h: usize, k: usize },
    #[error("candidate list contains the padding item")]
    PaddingCandidate,
    #[error("non-finite loss in window {window}")]
    NonFiniteLoss { window: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
