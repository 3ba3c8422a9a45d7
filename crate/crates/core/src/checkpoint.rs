//! Checkpoints: pooling of stale transactions, the veto-based binary agreement
//! that decides whether to drop them, and state transfer after recovery.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::message::{Message, Outbox, Timer};
use crate::model::{Endorsement, NodeId, TxId, TxStatus};
use crate::node::{Node, NodeEvent};
use crate::store::DatastoreState;
use crate::time::{SimDuration, SimTime};

const SYNC_RETRY: SimDuration = SimDuration(1_000_000);
const SYNC_MAX_ATTEMPTS: u32 = 10;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProposalId(pub [u8; 16]);

impl fmt::Debug for ProposalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Display for ProposalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointProposal {
    pub id: ProposalId,
    pub members: BTreeSet<TxId>,
    pub proposer: NodeId,
    pub start_time: SimTime,
}

impl CheckpointProposal {
    pub fn new(members: BTreeSet<TxId>, proposer: NodeId, start_time: SimTime) -> Self {
        let mut h = Sha256::new();
        h.update(proposer.0.to_be_bytes());
        h.update(start_time.0.to_be_bytes());
        for m in &members {
            h.update(m.0);
        }
        let digest = h.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        CheckpointProposal { id: ProposalId(id), members, proposer, start_time }
    }
}

/// What a node assumes about network delay and clock drift.
#[derive(Clone, Debug, PartialEq)]
pub struct SynchronyEstimator {
    pub tau_hat: Option<SimDuration>,
    pub skew_bounds: BTreeMap<NodeId, Option<SimDuration>>,
}

impl SynchronyEstimator {
    pub fn uniform(n: u32, tau_hat: SimDuration, skew_bound: SimDuration) -> Self {
        SynchronyEstimator {
            tau_hat: Some(tau_hat),
            skew_bounds: (0..n).map(|i| (NodeId(i), Some(skew_bound))).collect(),
        }
    }

    pub fn asynchronous(n: u32) -> Self {
        SynchronyEstimator { tau_hat: None, skew_bounds: (0..n).map(|i| (NodeId(i), None)).collect() }
    }

    pub fn is_synchronous(&self) -> bool {
        self.tau_hat.is_some() && self.skew_bounds.values().all(Option::is_some)
    }

    pub fn max_skew(&self) -> SimDuration {
        self.skew_bounds.values().flatten().copied().max().unwrap_or(SimDuration::ZERO)
    }
}

/// One local run of the veto procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct BvpInstance {
    pub proposal: CheckpointProposal,
    pub choice: u8,
    /// Latest send time of an endorsement that may still count.
    pub deadline: SimTime,
    pub decision: Option<u8>,
    pub started_at: SimTime,
    pub decided_at: Option<SimTime>,
}

impl BvpInstance {
    /// Endorsements stamped after the deadline of an undecided instance are ignored.
    pub fn suppresses(&self, e: &Endorsement) -> bool {
        self.decision.is_none() && self.proposal.members.contains(&e.tx_id) && e.sent_time > self.deadline
    }

    pub fn covers(&self, tx: TxId) -> bool {
        self.decision.is_none() && self.proposal.members.contains(&tx)
    }

    pub fn bound(&self, tau_hat: SimDuration) -> SimTime {
        self.started_at.max(self.deadline + tau_hat) + SimDuration::TICK
    }
}

#[derive(Clone, Debug, Default)]
pub struct PendingSync {
    pub queued: Vec<(NodeId, Message)>,
    pub replies: BTreeMap<NodeId, Vec<u8>>,
    pub attempts: u32,
}

impl Node {
    pub(crate) fn pool_candidates(&mut self, now: SimTime, candidates: BTreeSet<TxId>, out: &mut Outbox) {
        if !self.system.is_endorser(self.id) {
            return;
        }
        for tx in candidates {
            if !self.covered(tx) {
                self.pool.insert(tx);
            }
        }
        self.arm_pool(now, out);
    }

    /// While any checkpoint is undecided, stale transactions keep accumulating.
    fn checkpoint_pending(&self) -> bool {
        self.instances.values().any(|i| i.decision.is_none())
    }

    fn arm_pool(&mut self, now: SimTime, out: &mut Outbox) {
        if !self.pool.is_empty() && !self.pool_armed && !self.checkpoint_pending() {
            self.pool_armed = true;
            out.timers.push((now + self.system.checkpoint_pool_window, Timer::PoolFlush));
        }
    }

    fn covered(&self, tx: TxId) -> bool {
        self.instances.values().any(|i| i.covers(tx))
            || self.pending_proposals.iter().any(|(p, _)| p.members.contains(&tx))
    }

    pub(crate) fn flush_pool(&mut self, now: SimTime, out: &mut Outbox) {
        self.pool_armed = false;
        if self.checkpoint_pending() {
            return;
        }
        let pool = std::mem::take(&mut self.pool);
        let members: BTreeSet<TxId> = pool
            .into_iter()
            .filter(|tx| self.status(*tx).is_some_and(|s| !s.is_terminal()) && !self.covered(*tx) && self.old(*tx, now))
            .collect();
        if members.is_empty() {
            return;
        }
        let p = CheckpointProposal::new(members.clone(), self.id, now);
        self.events.push(NodeEvent::CheckpointProposed { proposal: p.id, members });
        out.broadcasts.push(Message::Checkpoint(p.clone()));
        self.on_checkpoint(now, p, out);
    }

    pub(crate) fn retry_pending_proposals(&mut self, now: SimTime, out: &mut Outbox) {
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending_proposals)
            .into_iter()
            .partition(|(p, _)| p.members.iter().all(|m| self.known.contains_key(m)));
        self.pending_proposals = waiting;
        for (p, _) in ready {
            self.on_checkpoint(now, p, out);
        }
    }

    pub(crate) fn on_checkpoint(&mut self, now: SimTime, p: CheckpointProposal, out: &mut Outbox) {
        if self.instances.contains_key(&p.id) || p.members.is_empty() {
            return;
        }
        if p.members.iter().any(|m| !self.known.contains_key(m)) {
            if !self.pending_proposals.iter().any(|(q, _)| q.id == p.id) {
                self.pending_proposals.push((p, now));
            }
            return;
        }
        let (choice, committed_member) = {
            let mut ev = crate::applicability::Evaluator::new(&self.endorsements, &self.status, self.system.omega);
            let any_applicable = p.members.iter().any(|m| ev.applicable(*m));
            let committed = p.members.iter().any(|m| self.status(*m) == Some(TxStatus::Committed));
            (if any_applicable { 0 } else { 1 }, committed)
        };
        let latest = p.members.iter().map(|m| self.known[m].deadline).max().expect("non-empty");
        let deadline = latest + self.sync.max_skew();
        let id = p.id;
        self.events.push(NodeEvent::BvpStarted {
            proposal: id,
            members: p.members.clone(),
            choice,
            committed_member,
            deadline,
        });
        self.instances.insert(
            id,
            BvpInstance { proposal: p, choice, deadline, decision: None, started_at: now, decided_at: None },
        );
        for m in &self.instances[&id].proposal.members {
            self.pool.remove(m);
        }
        if choice == 0 {
            self.decide(now, id, 0, out);
            return;
        }
        if let Some(tau) = self.sync.tau_hat {
            let fire = deadline + tau + SimDuration::TICK;
            if fire <= now {
                self.on_bvp_timeout(now, id, out);
            } else {
                out.timers.push((fire, Timer::BvpTimeout(id)));
            }
        }
    }

    pub(crate) fn on_bvp_timeout(&mut self, now: SimTime, id: ProposalId, out: &mut Outbox) {
        let Some(inst) = self.instances.get(&id) else {
            return;
        };
        if inst.decision.is_some() {
            return;
        }
        let members = inst.proposal.members.clone();
        let vetoed = {
            let mut ev = crate::applicability::Evaluator::new(&self.endorsements, &self.status, self.system.omega);
            members.iter().any(|m| ev.applicable(*m))
        };
        self.decide(now, id, if vetoed { 0 } else { 1 }, out);
    }

    /// Slow-path veto: a member turning applicable before the timeout decides 0.
    pub(crate) fn check_vetoes(&mut self, now: SimTime, out: &mut Outbox) {
        let open: Vec<(ProposalId, BTreeSet<TxId>)> = self
            .instances
            .iter()
            .filter(|(_, i)| i.decision.is_none())
            .map(|(id, i)| (*id, i.proposal.members.clone()))
            .collect();
        if open.is_empty() {
            return;
        }
        let vetoed: Vec<ProposalId> = {
            let mut ev = crate::applicability::Evaluator::new(&self.endorsements, &self.status, self.system.omega);
            open.into_iter().filter(|(_, ms)| ms.iter().any(|m| ev.applicable(*m))).map(|(id, _)| id).collect()
        };
        for id in vetoed {
            self.decide(now, id, 0, out);
        }
    }

    fn decide(&mut self, now: SimTime, id: ProposalId, decision: u8, out: &mut Outbox) {
        let tau = self.sync.tau_hat.unwrap_or(SimDuration::ZERO);
        let inst = self.instances.get_mut(&id).expect("instance");
        inst.decision = Some(decision);
        inst.decided_at = Some(now);
        let bound = inst.bound(tau);
        let started_at = inst.started_at;
        let members = inst.proposal.members.clone();
        self.events.push(NodeEvent::BvpDecided { proposal: id, decision, started_at, bound });
        if decision == 0 {
            let evidence = self.evidence(&members);
            if !evidence.is_empty() {
                out.broadcasts.push(Message::Evidence { proposal: id, endorsements: evidence });
            }
            // Members still stale later get pooled again.
            let again = now + self.system.checkpoint_pool_window;
            out.timers.extend(members.iter().map(|m| (again, Timer::OldCheck(*m))));
        } else {
            self.prune(now, id, &members, out);
        }
        self.arm_pool(now, out);
    }

    /// Valid endorsements backing every applicable member.
    fn evidence(&self, members: &BTreeSet<TxId>) -> Vec<Endorsement> {
        let mut ev = crate::applicability::Evaluator::new(&self.endorsements, &self.status, self.system.omega);
        let mut out = Vec::new();
        for m in members {
            if !ev.applicable(*m) {
                continue;
            }
            for e in self.endorsements.get(m).into_iter().flat_map(|s| s.values()) {
                if ev.valid(e) {
                    out.push(e.clone());
                }
            }
        }
        out
    }

    pub(crate) fn start_sync(&mut self, now: SimTime, out: &mut Outbox) {
        let attempts = self.syncing.as_ref().map_or(0, |s| s.attempts) + 1;
        let queued = self.syncing.take().map(|s| s.queued).unwrap_or_default();
        self.syncing = Some(PendingSync { queued, replies: BTreeMap::new(), attempts });
        out.broadcasts.push(Message::SnapshotRequest);
        out.timers.push((now + SYNC_RETRY, Timer::SnapshotRetry));
    }

    pub(crate) fn on_snapshot_retry(&mut self, now: SimTime, out: &mut Outbox) {
        let Some(s) = &self.syncing else { return };
        if s.attempts >= SYNC_MAX_ATTEMPTS {
            // Give up on transfer and continue from the retained local state.
            self.finish_sync(now, out);
        } else {
            self.start_sync(now, out);
        }
    }

    pub(crate) fn on_snapshot_reply(&mut self, now: SimTime, from: NodeId, snapshot: Vec<u8>, out: &mut Outbox) {
        let quorum = self.cfg.recovery_quorum.max(1) as usize;
        let s = self.syncing.as_mut().expect("syncing");
        s.replies.insert(from, snapshot.clone());
        if s.replies.values().filter(|r| **r == snapshot).count() < quorum {
            return;
        }
        let Ok(restored) = DatastoreState::restore(&snapshot) else {
            return;
        };
        if !restored.committed().is_superset(self.store.committed()) {
            return;
        }
        self.adopt(restored);
        self.finish_sync(now, out);
    }

    fn adopt(&mut self, restored: DatastoreState) {
        for id in self.store.discard_speculative() {
            self.events.push(NodeEvent::RolledBack(id));
            self.set_status(id, TxStatus::Pending);
            self.dirty.insert(id);
        }
        let newly: Vec<TxId> = restored.committed().difference(self.store.committed()).copied().collect();
        for id in &newly {
            if self.status(*id) == Some(TxStatus::Pending) {
                self.set_status(*id, TxStatus::Applicable);
            }
            self.set_status(*id, TxStatus::Committed);
            self.endorsed.remove(id);
            self.waiting.remove(id);
            self.dirty.insert(*id);
        }
        self.events.push(NodeEvent::SnapshotAdopted { committed: restored.committed().len() });
        self.store = restored;
    }

    fn finish_sync(&mut self, now: SimTime, out: &mut Outbox) {
        let queued = self.syncing.take().map(|s| s.queued).unwrap_or_default();
        for (from, msg) in queued {
            let o = self.on_message(now, from, msg);
            out.broadcasts.extend(o.broadcasts);
            out.sends.extend(o.sends);
            out.timers.extend(o.timers);
        }
        let open: Vec<TxId> = self.status.iter().filter(|(_, s)| !s.is_terminal()).map(|(id, _)| *id).collect();
        self.dirty.extend(open);
        self.check_all(now, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposal_id_depends_on_members() {
        let a: BTreeSet<TxId> = [TxId::from_u128(1), TxId::from_u128(2)].into();
        let b: BTreeSet<TxId> = [TxId::from_u128(1)].into();
        let pa = CheckpointProposal::new(a.clone(), NodeId(0), SimTime::ZERO);
        assert_eq!(pa.id, CheckpointProposal::new(a, NodeId(0), SimTime::ZERO).id);
        assert_ne!(pa.id, CheckpointProposal::new(b, NodeId(0), SimTime::ZERO).id);
    }

    #[test]
    fn suppression_only_while_undecided() {
        let m: BTreeSet<TxId> = [TxId::from_u128(1)].into();
        let mut inst = BvpInstance {
            proposal: CheckpointProposal::new(m, NodeId(0), SimTime::ZERO),
            choice: 1,
            deadline: SimTime::from_millis(100),
            decision: None,
            started_at: SimTime::ZERO,
            decided_at: None,
        };
        let late = Endorsement {
            tx_id: TxId::from_u128(1),
            endorser: NodeId(2),
            conditions: BTreeSet::new(),
            sent_time: SimTime::from_millis(101),
        };
        let early = Endorsement { sent_time: SimTime::from_millis(100), ..late.clone() };
        assert!(inst.suppresses(&late));
        assert!(!inst.suppresses(&early));
        inst.decision = Some(0);
        assert!(!inst.suppresses(&late));
    }

    #[test]
    fn estimator_max_skew() {
        let s = SynchronyEstimator::uniform(4, SimDuration::from_secs(10), SimDuration::from_secs(10));
        assert!(s.is_synchronous());
        assert_eq!(s.max_skew(), SimDuration::from_secs(10));
        assert!(!SynchronyEstimator::asynchronous(4).is_synchronous());
    }
}
