//! Replicated key-value store core: conditional endorsements, applicability
//! evaluation, speculative execution and checkpoint agreement.

pub mod applicability;
pub mod checkpoint;
pub mod error;
pub mod message;
pub mod model;
pub mod node;
pub mod policy;
pub mod store;
pub mod time;

pub use applicability::{EndorsementSets, Evaluator};
pub use checkpoint::{BvpInstance, CheckpointProposal, ProposalId, SynchronyEstimator};
pub use error::{ConfigError, SnapshotError, StoreError};
pub use message::{Message, Outbox, Timer};
pub use model::{
    conflicts, filter_endorsement, min_quorum, Endorsement, FilterReject, NodeId, Operation, Precondition,
    SystemConfig, Transaction, TxId, TxMap, TxStatus,
};
pub use node::{Abort, Node, NodeConfig, NodeEvent};
pub use policy::EndorsementPolicy;
pub use store::{DatastoreState, Entry, Value};
pub use time::{SimDuration, SimTime};
