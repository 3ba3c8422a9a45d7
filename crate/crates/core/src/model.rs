//! Domain types shared by every part of the protocol: transactions,
//! endorsements, statuses, quorum arithmetic, the conflict relation and the
//! acyclic-conditions filter.

use std::collections::BTreeSet;

use rustc_hash::FxHashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::time::{SimDuration, SimTime};

/// Hash map keyed by transaction id.
pub type TxMap<V> = FxHashMap<TxId, V>;

/// 16-byte transaction identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub [u8; 16]);

impl TxId {
    /// Builds an id whose trailing bytes hold `n`; handy for hand-written scenarios.
    pub fn from_u128(n: u128) -> Self {
        TxId(n.to_be_bytes())
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx:")?;
        for b in &self.0[12..] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A single datastore mutation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    Put { key: String, value: Vec<u8> },
    Increment { key: String, delta: i64 },
    Delete { key: String },
}

impl Operation {
    pub fn key(&self) -> &str {
        match self {
            Operation::Put { key, .. } | Operation::Increment { key, .. } | Operation::Delete { key } => key,
        }
    }

    /// Increments commute with each other; everything else is order sensitive.
    pub fn is_commutative(&self) -> bool {
        matches!(self, Operation::Increment { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Precondition {
    pub key: String,
    pub expected_version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub deadline: SimTime,
    pub preconditions: Vec<Precondition>,
    pub ops: Vec<Operation>,
    pub submitter: NodeId,
    pub submit_time: SimTime,
}

impl Transaction {
    /// Checks the structural invariants a correct client always respects.
    pub fn is_well_formed(&self) -> bool {
        !self.ops.is_empty() && self.deadline > self.submit_time && self.ops.iter().all(|op| !op.key().is_empty())
    }

    /// Total order used for tie-breaking: deadline first, then id bytes.
    pub fn order_key(&self) -> (SimTime, TxId) {
        (self.deadline, self.id)
    }
}

/// A node's vote for a transaction, valid only while none of `conditions` is applicable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endorsement {
    pub tx_id: TxId,
    pub endorser: NodeId,
    pub conditions: BTreeSet<TxId>,
    /// Sender-local clock reading at broadcast, stamped by the authenticated envelope.
    pub sent_time: SimTime,
}

impl Endorsement {
    pub fn is_unconditional(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// Local view of a transaction's life cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxStatus {
    Pending,
    Applicable,
    Applied,
    Committed,
    Dropped,
}

impl TxStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TxStatus::Committed | TxStatus::Dropped)
    }

    /// Legal edges of the transaction state diagram.
    pub fn can_transition(self, to: TxStatus) -> bool {
        use TxStatus::*;
        matches!(
            (self, to),
            (Pending, Applicable)
                | (Applicable, Pending)
                | (Applicable, Applied)
                | (Applied, Pending)
                | (Applied, Committed)
                | (Applicable, Committed)
                | (Pending, Dropped)
        )
    }
}

/// System-wide protocol parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of endorsers. Endorser ids are `0..n`.
    pub n: u32,
    /// Maximum number of Byzantine endorsers tolerated.
    pub f: u32,
    /// Required quorum of valid endorsements.
    pub omega: u32,
    /// Delay after a deadline before an unapplicable transaction becomes a checkpoint candidate.
    pub old_delay: SimDuration,
    pub checkpoint_pool_window: SimDuration,
    pub speculative_default: bool,
}

impl SystemConfig {
    pub fn new(n: u32, f: u32, omega: u32) -> Result<Self, ConfigError> {
        let cfg = SystemConfig {
            n,
            f,
            omega,
            old_delay: SimDuration::from_secs(2),
            checkpoint_pool_window: SimDuration::from_millis(500),
            speculative_default: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        min_quorum(self.n, self.f)?;
        let floor = (self.n + self.f) / 2;
        if self.omega <= floor || self.omega > self.n {
            return Err(ConfigError::QuorumOutOfRange { omega: self.omega, n: self.n, f: self.f });
        }
        if self.old_delay <= SimDuration::ZERO {
            return Err(ConfigError::NonPositiveOldDelay);
        }
        if self.checkpoint_pool_window < SimDuration::ZERO {
            return Err(ConfigError::NegativePoolWindow);
        }
        Ok(())
    }

    pub fn is_endorser(&self, id: NodeId) -> bool {
        id.0 < self.n
    }
}

/// Smallest Byzantine quorum: `floor((n + f) / 2) + 1`.
pub fn min_quorum(n: u32, f: u32) -> Result<u32, ConfigError> {
    if n == 0 || (n as u64) < 3 * f as u64 + 1 {
        return Err(ConfigError::TooFewNodes { n, f });
    }
    Ok((n + f) / 2 + 1)
}

/// The conflict relation between two operation lists.
///
/// Two lists conflict iff they touch a common key and at least one of the two
/// operations on that key is not commutative.
pub fn conflicts(a: &[Operation], b: &[Operation]) -> bool {
    a.iter().any(|x| b.iter().any(|y| x.key() == y.key() && !(x.is_commutative() && y.is_commutative())))
}

/// Why an incoming endorsement was refused.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FilterReject {
    #[error("endorsed transaction {0:?} is unknown")]
    UnknownTransaction(TxId),
    #[error("condition {0:?} is unknown")]
    UnknownCondition(TxId),
    #[error("condition {condition:?} does not expire strictly before the endorsed transaction")]
    DeadlineOrder { condition: TxId },
    #[error("endorsement stamped at or after the transaction deadline")]
    PostDeadline,
    #[error("{0} is not an endorser")]
    NotEndorser(NodeId),
}

/// Acyclic-conditions filter: every condition must be known and expire strictly
/// before the endorsed transaction, and the endorsement must have been sent
/// before the endorsed transaction's deadline.
pub fn filter_endorsement(e: &Endorsement, known: &FxHashMap<TxId, Transaction>) -> Result<(), FilterReject> {
    let target = known.get(&e.tx_id).ok_or(FilterReject::UnknownTransaction(e.tx_id))?;
    if e.sent_time >= target.deadline {
        return Err(FilterReject::PostDeadline);
    }
    for c in &e.conditions {
        let cond = known.get(c).ok_or(FilterReject::UnknownCondition(*c))?;
        if cond.deadline >= target.deadline {
            return Err(FilterReject::DeadlineOrder { condition: *c });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(k: &str) -> Operation {
        Operation::Put { key: k.into(), value: b"v".to_vec() }
    }

    fn inc(k: &str, d: i64) -> Operation {
        Operation::Increment { key: k.into(), delta: d }
    }

    fn tx(n: u128, deadline_ms: i64) -> Transaction {
        Transaction {
            id: TxId::from_u128(n),
            deadline: SimTime::from_millis(deadline_ms),
            preconditions: vec![],
            ops: vec![put("k")],
            submitter: NodeId(0),
            submit_time: SimTime::ZERO,
        }
    }

    fn endorsement(target: u128, conds: &[u128]) -> Endorsement {
        Endorsement {
            tx_id: TxId::from_u128(target),
            endorser: NodeId(1),
            conditions: conds.iter().map(|c| TxId::from_u128(*c)).collect(),
            sent_time: SimTime::ZERO,
        }
    }

    #[test]
    fn conflict_examples() {
        assert!(!conflicts(&[put("k1")], &[put("k2")]));
        assert!(conflicts(&[put("k1")], &[Operation::Put { key: "k1".into(), value: b"v2".to_vec() }]));
        assert!(!conflicts(&[inc("k1", 1)], &[inc("k1", 2)]));
        assert!(conflicts(&[inc("k1", 1)], &[Operation::Delete { key: "k1".into() }]));
    }

    #[test]
    fn quorum_examples() {
        assert_eq!(min_quorum(10, 3), Ok(7));
        assert_eq!(min_quorum(4, 1), Ok(3));
        assert_eq!(min_quorum(1, 0), Ok(1));
        assert!(min_quorum(9, 3).is_err());
        assert!(min_quorum(0, 0).is_err());
    }

    #[test]
    fn config_rejects_weak_quorum() {
        assert!(SystemConfig::new(10, 3, 6).is_err());
        assert!(SystemConfig::new(10, 3, 11).is_err());
        assert!(SystemConfig::new(10, 3, 7).is_ok());
    }

    #[test]
    fn status_automaton() {
        use TxStatus::*;
        assert!(Pending.can_transition(Applicable));
        assert!(Applied.can_transition(Pending));
        assert!(!Committed.can_transition(Pending));
        assert!(!Dropped.can_transition(Applicable));
        assert!(!Pending.can_transition(Committed));
        assert!(!Applicable.can_transition(Dropped));
    }

    #[test]
    fn filter_examples() {
        let known: FxHashMap<_, _> = [tx(1, 1_000), tx(2, 2_000)].into_iter().map(|t| (t.id, t)).collect();
        assert_eq!(filter_endorsement(&endorsement(1, &[]), &known), Ok(()));
        // q (earlier) conditioned on r (later)
        assert_eq!(
            filter_endorsement(&endorsement(1, &[2]), &known),
            Err(FilterReject::DeadlineOrder { condition: TxId::from_u128(2) })
        );
        assert_eq!(filter_endorsement(&endorsement(2, &[1]), &known), Ok(()));
        assert_eq!(
            filter_endorsement(&endorsement(2, &[9]), &known),
            Err(FilterReject::UnknownCondition(TxId::from_u128(9)))
        );
        let mut late = endorsement(1, &[]);
        late.sent_time = SimTime::from_millis(1_000);
        assert_eq!(filter_endorsement(&late, &known), Err(FilterReject::PostDeadline));
    }

    #[test]
    fn equal_deadlines_never_condition_each_other() {
        let known: FxHashMap<_, _> = [tx(1, 1_000), tx(2, 1_000)].into_iter().map(|t| (t.id, t)).collect();
        assert!(filter_endorsement(&endorsement(1, &[2]), &known).is_err());
        assert!(filter_endorsement(&endorsement(2, &[1]), &known).is_err());
    }
}
