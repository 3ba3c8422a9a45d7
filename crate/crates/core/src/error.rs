use thiserror::Error;

use crate::model::TxId;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("n = {n} cannot tolerate f = {f} Byzantine nodes (need n >= 3f + 1)")]
    TooFewNodes { n: u32, f: u32 },
    #[error("quorum {omega} must exceed floor((n + f) / 2) and be at most n (n = {n}, f = {f})")]
    QuorumOutOfRange { omega: u32, n: u32, f: u32 },
    #[error("old-trigger delay must be positive")]
    NonPositiveOldDelay,
    #[error("checkpoint pool window must not be negative")]
    NegativePoolWindow,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("transaction {0:?} is already applied")]
    AlreadyApplied(TxId),
    #[error("transaction {0:?} is already committed")]
    AlreadyCommitted(TxId),
    #[error("transaction {0:?} is not applied")]
    NotApplied(TxId),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown value tag {0}")]
    BadTag(u8),
    #[error("key is not valid UTF-8")]
    BadKey,
    #[error("entries or transaction ids are not strictly sorted")]
    Unsorted,
    #[error("{0} trailing bytes after snapshot")]
    Trailing(usize),
}
