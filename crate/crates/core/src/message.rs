use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointProposal, ProposalId};
use crate::model::{Endorsement, NodeId, Transaction, TxId};
use crate::time::SimTime;

/// Everything nodes exchange over the reliable broadcast (or point to point
/// for state transfer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Transaction(Transaction),
    Endorsement(Endorsement),
    Checkpoint(CheckpointProposal),
    /// Veto evidence: endorsements re-sent with their original stamps.
    Evidence {
        proposal: ProposalId,
        endorsements: Vec<Endorsement>,
    },
    SnapshotRequest,
    SnapshotReply {
        snapshot: Vec<u8>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Transaction(_) => "transaction",
            Message::Endorsement(_) => "endorsement",
            Message::Checkpoint(_) => "checkpoint",
            Message::Evidence { .. } => "evidence",
            Message::SnapshotRequest => "snapshot-request",
            Message::SnapshotReply { .. } => "snapshot-reply",
        }
    }
}

/// Local timers a node asks its driver to arm. Fire times are node-local.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Timer {
    RetryEndorse(TxId),
    OldCheck(TxId),
    BufferExpiry,
    PoolFlush,
    BvpTimeout(ProposalId),
    SnapshotRetry,
}

/// Side effects produced by one node step.
#[derive(Clone, Debug, Default)]
pub struct Outbox {
    pub broadcasts: Vec<Message>,
    pub sends: Vec<(NodeId, Message)>,
    pub timers: Vec<(SimTime, Timer)>,
}

impl Outbox {
    pub fn is_empty(&self) -> bool {
        self.broadcasts.is_empty() && self.sends.is_empty() && self.timers.is_empty()
    }
}
