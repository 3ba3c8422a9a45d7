//! Per-node protocol state machine: endorsement decisions, state checking,
//! speculative execution and checkpoint triggering.
//!
//! The node is network agnostic. Every entry point takes the node-local clock
//! reading and returns an [`Outbox`] of broadcasts, point-to-point sends and
//! timers for the driver to execute. Observable state changes are queued as
//! [`NodeEvent`]s and drained by the driver.

use std::collections::{BTreeMap, BTreeSet};

use rustc_hash::{FxHashMap, FxHashSet};

use crate::applicability::{EndorsementSets, Evaluator};
use crate::checkpoint::{BvpInstance, PendingSync, ProposalId, SynchronyEstimator};
use crate::message::{Message, Outbox, Timer};
use crate::model::{
    conflicts, filter_endorsement, Endorsement, FilterReject, NodeId, SystemConfig, Transaction, TxId, TxStatus,
};
use crate::policy::EndorsementPolicy;
use crate::store::DatastoreState;
use crate::time::{SimDuration, SimTime};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub id: NodeId,
    pub speculative: bool,
    pub policy: EndorsementPolicy,
    /// Informational: the driver applies the skew when computing local time.
    pub clock_skew: SimDuration,
    /// Identical snapshots required before adopting transferred state.
    pub recovery_quorum: u32,
}

impl NodeConfig {
    pub fn new(id: NodeId) -> Self {
        NodeConfig {
            id,
            speculative: false,
            policy: EndorsementPolicy::ApproveAll,
            clock_skew: SimDuration::ZERO,
            recovery_quorum: 1,
        }
    }
}

/// Why a node declined to endorse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Abort {
    Timeout,
    Consistency,
    Policy,
}

/// Observable effects, drained by the driver for metrics and invariant checks.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeEvent {
    Status { tx: TxId, from: Option<TxStatus>, to: TxStatus },
    IllegalTransition { tx: TxId, from: TxStatus, to: TxStatus },
    Applied(TxId),
    RolledBack(TxId),
    Endorsed { tx: TxId, conditions: BTreeSet<TxId> },
    EndorsementAccepted { tx: TxId, endorser: NodeId, path_len: u32 },
    Suspect { endorser: NodeId, tx: TxId, reason: FilterReject },
    Equivocation { endorser: NodeId, tx: TxId },
    Suppressed { endorser: NodeId, tx: TxId, proposal: ProposalId },
    CheckpointProposed { proposal: ProposalId, members: BTreeSet<TxId> },
    BvpStarted { proposal: ProposalId, members: BTreeSet<TxId>, choice: u8, committed_member: bool, deadline: SimTime },
    BvpDecided { proposal: ProposalId, decision: u8, started_at: SimTime, bound: SimTime },
    PrunedCommitted { tx: TxId, proposal: ProposalId },
    SnapshotAdopted { committed: usize },
    EvalDepth(usize),
}

pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) system: SystemConfig,
    pub(crate) cfg: NodeConfig,
    pub(crate) sync: SynchronyEstimator,
    pub(crate) known: FxHashMap<TxId, Transaction>,
    /// Transactions endorsed and still unresolved.
    pub(crate) endorsed: BTreeSet<TxId>,
    /// Every transaction this node ever endorsed; a correct node votes once.
    pub(crate) voted: FxHashSet<TxId>,
    pub(crate) waiting: FxHashSet<TxId>,
    pub(crate) endorsements: EndorsementSets,
    pub(crate) status: FxHashMap<TxId, TxStatus>,
    pub(crate) store: DatastoreState,
    pub(crate) buffered: Vec<(Endorsement, SimTime)>,
    pub(crate) path_len: FxHashMap<TxId, u32>,
    /// Reverse condition edges: who holds an endorsement conditioned on the key.
    pub(crate) dependents: FxHashMap<TxId, BTreeSet<TxId>>,
    /// Transactions whose applicability may have changed since the last check.
    pub(crate) dirty: BTreeSet<TxId>,
    /// As-received form of endorsements whose conditions were later stripped.
    pub(crate) originals: FxHashMap<(TxId, NodeId), Endorsement>,
    pub(crate) pool: BTreeSet<TxId>,
    pub(crate) pool_armed: bool,
    pub(crate) instances: BTreeMap<ProposalId, BvpInstance>,
    pub(crate) pending_proposals: Vec<(crate::checkpoint::CheckpointProposal, SimTime)>,
    pub(crate) syncing: Option<PendingSync>,
    pub(crate) events: Vec<NodeEvent>,
}

impl Node {
    pub fn new(system: SystemConfig, cfg: NodeConfig, sync: SynchronyEstimator) -> Self {
        Node {
            id: cfg.id,
            system,
            cfg,
            sync,
            known: FxHashMap::default(),
            endorsed: BTreeSet::new(),
            voted: FxHashSet::default(),
            waiting: FxHashSet::default(),
            endorsements: FxHashMap::default(),
            status: FxHashMap::default(),
            store: DatastoreState::new(),
            buffered: Vec::new(),
            path_len: FxHashMap::default(),
            dependents: FxHashMap::default(),
            dirty: BTreeSet::new(),
            originals: FxHashMap::default(),
            pool: BTreeSet::new(),
            pool_armed: false,
            instances: BTreeMap::new(),
            pending_proposals: Vec::new(),
            syncing: None,
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn system(&self) -> &SystemConfig {
        &self.system
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &DatastoreState {
        &self.store
    }

    pub fn status(&self, tx: TxId) -> Option<TxStatus> {
        self.status.get(&tx).copied()
    }

    pub fn statuses(&self) -> &FxHashMap<TxId, TxStatus> {
        &self.status
    }

    pub fn known(&self) -> &FxHashMap<TxId, Transaction> {
        &self.known
    }

    pub fn endorsements_for(&self, tx: TxId) -> impl Iterator<Item = &Endorsement> {
        self.endorsements.get(&tx).into_iter().flat_map(|m| m.values())
    }

    /// The set of transactions this node has endorsed and not yet resolved.
    pub fn endorsed_set(&self) -> &BTreeSet<TxId> {
        &self.endorsed
    }

    pub fn instances(&self) -> &BTreeMap<ProposalId, BvpInstance> {
        &self.instances
    }

    pub fn is_syncing(&self) -> bool {
        self.syncing.is_some()
    }

    pub fn drain_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn is_endorser(&self) -> bool {
        self.system.is_endorser(self.id) && self.cfg.policy != EndorsementPolicy::RejectAll
    }

    fn evaluator(&self) -> Evaluator<'_> {
        Evaluator::new(&self.endorsements, &self.status, self.system.omega)
    }

    /// `Applicable` evaluated against the current endorsement sets.
    pub fn applicable(&self, tx: TxId) -> bool {
        self.evaluator().applicable(tx)
    }

    /// `Valid` evaluated against the current endorsement sets.
    pub fn valid(&self, e: &Endorsement) -> bool {
        self.evaluator().valid(e)
    }

    /// Checkpoint trigger: unapplicable and expired for longer than the old delay.
    pub fn old(&self, tx: TxId, now: SimTime) -> bool {
        let Some(t) = self.known.get(&tx) else {
            return false;
        };
        !self.applicable(tx) && t.deadline < now - self.system.old_delay
    }

    pub fn can_endorse(&self, t: &Transaction, now: SimTime) -> Result<(), Abort> {
        if t.deadline <= now {
            return Err(Abort::Timeout);
        }
        if !self.store.check_preconditions(t) {
            return Err(Abort::Consistency);
        }
        if !self.cfg.policy.approves(t, &self.store.preview(t)) {
            return Err(Abort::Policy);
        }
        Ok(())
    }

    pub(crate) fn set_status(&mut self, tx: TxId, to: TxStatus) {
        let from = self.status.get(&tx).copied();
        if from == Some(to) {
            return;
        }
        if let Some(f) = from {
            if !f.can_transition(to) {
                self.events.push(NodeEvent::IllegalTransition { tx, from: f, to });
                return;
            }
        }
        self.status.insert(tx, to);
        self.events.push(NodeEvent::Status { tx, from, to });
    }

    fn is_terminal(&self, tx: TxId) -> bool {
        self.status.get(&tx).is_some_and(|s| s.is_terminal())
    }

    /// Single entry point for delivered messages.
    pub fn on_message(&mut self, now: SimTime, from: NodeId, msg: Message) -> Outbox {
        let mut out = Outbox::default();
        if self.syncing.is_some() {
            match msg {
                Message::SnapshotReply { snapshot } => self.on_snapshot_reply(now, from, snapshot, &mut out),
                Message::SnapshotRequest => {}
                other => self.syncing.as_mut().expect("syncing").queued.push((from, other)),
            }
            return out;
        }
        match msg {
            Message::Transaction(t) => self.on_transaction(now, t, &mut out),
            Message::Endorsement(e) => {
                if self.receive_endorsement(now, e, &mut out) {
                    self.check_all(now, &mut out);
                }
            }
            Message::Checkpoint(p) => self.on_checkpoint(now, p, &mut out),
            Message::Evidence { endorsements, .. } => {
                let mut changed = false;
                for e in endorsements {
                    changed |= self.receive_endorsement(now, e, &mut out);
                }
                if changed {
                    self.check_all(now, &mut out);
                }
            }
            Message::SnapshotRequest => {
                out.sends.push((from, Message::SnapshotReply { snapshot: self.store.snapshot() }));
            }
            Message::SnapshotReply { .. } => {}
        }
        out
    }

    pub fn on_timer(&mut self, now: SimTime, timer: Timer) -> Outbox {
        let mut out = Outbox::default();
        match timer {
            Timer::RetryEndorse(tx) => {
                if self.waiting.remove(&tx) {
                    self.try_endorse(now, tx, &mut out);
                }
            }
            Timer::OldCheck(tx) => {
                self.dirty.insert(tx);
                self.check_all(now, &mut out);
            }
            Timer::BufferExpiry => self.expire_buffered(now, &mut out),
            Timer::PoolFlush => self.flush_pool(now, &mut out),
            Timer::BvpTimeout(id) => self.on_bvp_timeout(now, id, &mut out),
            Timer::SnapshotRetry => self.on_snapshot_retry(now, &mut out),
        }
        out
    }

    fn on_transaction(&mut self, now: SimTime, t: Transaction, out: &mut Outbox) {
        if self.known.contains_key(&t.id) || !t.is_well_formed() {
            return;
        }
        let id = t.id;
        let old_at = t.deadline + self.system.old_delay + SimDuration::TICK;
        self.known.insert(id, t);
        if self.is_terminal(id) {
            return;
        }
        if !self.status.contains_key(&id) {
            self.set_status(id, TxStatus::Pending);
        }
        out.timers.push((old_at, Timer::OldCheck(id)));
        self.try_endorse(now, id, out);
        let buffered_changed = self.drain_buffered(now, out);
        self.retry_pending_proposals(now, out);
        if buffered_changed {
            self.check_all(now, out);
        }
    }

    /// One iteration of the endorsement loop; re-armed by timer while a
    /// conflicting endorsed transaction is still live.
    pub(crate) fn try_endorse(&mut self, now: SimTime, id: TxId, out: &mut Outbox) {
        if !self.is_endorser() || self.voted.contains(&id) || self.is_terminal(id) {
            return;
        }
        let Some(t) = self.known.get(&id) else { return };
        if self.can_endorse(t, now).is_err() {
            return;
        }
        let conflicting: Vec<&Transaction> = self
            .endorsed
            .iter()
            .filter_map(|c| self.known.get(c))
            .filter(|c| c.id != id && conflicts(&c.ops, &t.ops))
            .collect();
        if conflicting.iter().all(|c| c.deadline <= now) {
            let conditions: BTreeSet<TxId> = conflicting.iter().map(|c| c.id).collect();
            let e = Endorsement { tx_id: id, endorser: self.id, conditions: conditions.clone(), sent_time: now };
            self.voted.insert(id);
            self.endorsed.insert(id);
            self.events.push(NodeEvent::Endorsed { tx: id, conditions });
            out.broadcasts.push(Message::Endorsement(e));
        } else {
            let next = conflicting.iter().map(|c| c.deadline).filter(|d| *d > now).min().expect("live conflict");
            self.waiting.insert(id);
            out.timers.push((next, Timer::RetryEndorse(id)));
        }
    }

    fn retry_waiting(&mut self, now: SimTime, out: &mut Outbox) {
        let mut ids: Vec<TxId> = self.waiting.iter().copied().collect();
        ids.sort();
        for id in ids {
            self.waiting.remove(&id);
            self.try_endorse(now, id, out);
        }
    }

    /// Filters and stores one endorsement. Returns whether the graph changed.
    pub(crate) fn receive_endorsement(&mut self, now: SimTime, mut e: Endorsement, out: &mut Outbox) -> bool {
        if !self.system.is_endorser(e.endorser) {
            self.events.push(NodeEvent::Suspect {
                endorser: e.endorser,
                tx: e.tx_id,
                reason: FilterReject::NotEndorser(e.endorser),
            });
            return false;
        }
        if self.is_terminal(e.tx_id) {
            return false;
        }
        if !self.known.contains_key(&e.tx_id) || e.conditions.iter().any(|c| !self.known.contains_key(c)) {
            // A condition committed through state transfer is unknown here but
            // makes the endorsement permanently invalid.
            if e.conditions.iter().any(|c| !self.known.contains_key(c) && self.status(*c) == Some(TxStatus::Committed))
            {
                return false;
            }
            if self.buffered.is_empty() {
                out.timers.push((now + self.buffer_timeout(), Timer::BufferExpiry));
            }
            self.buffered.push((e, now));
            return false;
        }
        if let Err(reason) = filter_endorsement(&e, &self.known) {
            self.events.push(NodeEvent::Suspect { endorser: e.endorser, tx: e.tx_id, reason });
            return false;
        }
        if let Some((pid, _)) = self.instances.iter().find(|(_, inst)| inst.suppresses(&e)) {
            self.events.push(NodeEvent::Suppressed { endorser: e.endorser, tx: e.tx_id, proposal: *pid });
            return false;
        }
        let original = e.clone();
        let dropped: Vec<TxId> =
            e.conditions.iter().copied().filter(|c| self.status(*c) == Some(TxStatus::Dropped)).collect();
        for c in dropped {
            e.conditions.remove(&c);
        }
        let key = (e.tx_id, e.endorser);
        let set = self.endorsements.entry(e.tx_id).or_default();
        if let Some(existing) = set.get(&e.endorser) {
            let kept = self.originals.get(&key).unwrap_or(existing);
            if *kept == original {
                return false;
            }
            self.events.push(NodeEvent::Equivocation { endorser: e.endorser, tx: e.tx_id });
            // Every node keeps the same version whatever the arrival order, and
            // an unconditional one always wins so a commit seen anywhere stays reachable.
            if rank(kept) <= rank(&original) {
                return false;
            }
        }
        if original != e {
            self.originals.insert(key, original);
        } else {
            self.originals.remove(&key);
        }
        let len = e.conditions.iter().map(|c| self.path_len.get(c).copied().unwrap_or(0) + 1).max().unwrap_or(0);
        let entry = self.path_len.entry(e.tx_id).or_insert(0);
        *entry = (*entry).max(len);
        self.events.push(NodeEvent::EndorsementAccepted { tx: e.tx_id, endorser: e.endorser, path_len: *entry });
        for c in &e.conditions {
            self.dependents.entry(*c).or_default().insert(e.tx_id);
        }
        self.dirty.insert(e.tx_id);
        set.insert(e.endorser, e);
        true
    }

    pub(crate) fn buffer_timeout(&self) -> SimDuration {
        SimDuration(self.sync.tau_hat.unwrap_or(SimDuration::from_secs(10)).0 * 2)
    }

    fn drain_buffered(&mut self, now: SimTime, out: &mut Outbox) -> bool {
        let ready: Vec<(Endorsement, SimTime)>;
        (ready, self.buffered) = std::mem::take(&mut self.buffered).into_iter().partition(|(e, _)| {
            self.known.contains_key(&e.tx_id) && e.conditions.iter().all(|c| self.known.contains_key(c))
        });
        let mut changed = false;
        for (e, _) in ready {
            changed |= self.receive_endorsement(now, e, out);
        }
        changed
    }

    fn expire_buffered(&mut self, now: SimTime, out: &mut Outbox) {
        let timeout = self.buffer_timeout();
        let expired: Vec<(Endorsement, SimTime)>;
        (expired, self.buffered) =
            std::mem::take(&mut self.buffered).into_iter().partition(|(_, at)| *at + timeout <= now);
        for (e, _) in expired {
            let reason = if !self.known.contains_key(&e.tx_id) {
                FilterReject::UnknownTransaction(e.tx_id)
            } else {
                let c = e.conditions.iter().find(|c| !self.known.contains_key(c)).copied().expect("unknown condition");
                FilterReject::UnknownCondition(c)
            };
            self.events.push(NodeEvent::Suspect { endorser: e.endorser, tx: e.tx_id, reason });
        }
        if let Some(first) = self.buffered.iter().map(|(_, at)| *at).min() {
            out.timers.push((first + timeout, Timer::BufferExpiry));
        }
    }

    /// Dirty transactions and everything whose conditions lead to them.
    fn affected(&mut self) -> Vec<TxId> {
        let mut seen: BTreeSet<TxId> = BTreeSet::new();
        let mut stack: Vec<TxId> = std::mem::take(&mut self.dirty).into_iter().collect();
        while let Some(tx) = stack.pop() {
            if !seen.insert(tx) {
                continue;
            }
            if let Some(ds) = self.dependents.get(&tx) {
                stack.extend(ds.iter().filter(|d| !seen.contains(d)));
            }
        }
        let mut ids: Vec<TxId> = seen
            .into_iter()
            .filter(|id| self.known.contains_key(id) && self.status(*id).is_some_and(|s| !s.is_terminal()))
            .collect();
        ids.sort_by_key(|id| self.known[id].order_key());
        ids
    }

    /// `CheckState` over every unresolved transaction that may have changed.
    pub(crate) fn check_all(&mut self, now: SimTime, out: &mut Outbox) {
        let ids = self.affected();
        let (verdicts, depth) = {
            let mut ev = self.evaluator();
            let v: Vec<(TxId, bool)> = ids.iter().map(|id| (*id, ev.applicable(*id))).collect();
            (v, ev.max_depth())
        };
        if depth > 0 {
            self.events.push(NodeEvent::EvalDepth(depth));
        }

        // Rollbacks first so that no two conflicting transactions are ever
        // applied together, even transiently.
        for (id, applicable) in &verdicts {
            if !applicable {
                self.demote(*id);
            }
        }
        let mut committed_any = false;
        for (id, applicable) in &verdicts {
            if !applicable {
                continue;
            }
            if self.status(*id) == Some(TxStatus::Pending) {
                self.set_status(*id, TxStatus::Applicable);
            }
            if self.cfg.speculative && !self.store.is_applied(*id) {
                self.apply(*id);
            }
            let unconditional = self.endorsements_for(*id).filter(|e| e.is_unconditional()).count() as u32;
            if unconditional >= self.system.omega {
                self.commit(*id);
                committed_any = true;
            }
        }

        let candidates: BTreeSet<TxId> = {
            let mut ev = self.evaluator();
            verdicts
                .iter()
                .map(|(id, _)| *id)
                .filter(|id| !self.is_terminal(*id))
                .filter(|id| !ev.applicable(*id) && self.known[id].deadline < now - self.system.old_delay)
                .collect()
        };
        if !candidates.is_empty() {
            self.pool_candidates(now, candidates, out);
        }
        self.check_vetoes(now, out);
        if committed_any {
            self.retry_waiting(now, out);
        }
    }

    fn demote(&mut self, id: TxId) {
        match self.status(id) {
            Some(TxStatus::Applied) => {
                self.store.rollback(id).expect("applied transaction rolls back");
                self.events.push(NodeEvent::RolledBack(id));
                self.set_status(id, TxStatus::Pending);
            }
            Some(TxStatus::Applicable) => self.set_status(id, TxStatus::Pending),
            _ => {}
        }
    }

    fn apply(&mut self, id: TxId) {
        let t = &self.known[&id];
        self.store.apply(t).expect("apply of unapplied transaction");
        self.events.push(NodeEvent::Applied(id));
        self.set_status(id, TxStatus::Applied);
    }

    fn commit(&mut self, id: TxId) {
        if self.status(id) == Some(TxStatus::Pending) {
            self.set_status(id, TxStatus::Applicable);
        }
        if !self.store.is_applied(id) {
            self.store.apply(&self.known[&id]).expect("apply before commit");
            self.events.push(NodeEvent::Applied(id));
        }
        self.store.commit(id).expect("commit of applied transaction");
        self.set_status(id, TxStatus::Committed);
        self.endorsed.remove(&id);
        self.waiting.remove(&id);
    }

    /// Drops `members` and forgets every trace of them in the condition graph.
    pub(crate) fn prune(&mut self, now: SimTime, proposal: ProposalId, members: &BTreeSet<TxId>, out: &mut Outbox) {
        for tx in members {
            match self.status(*tx) {
                Some(TxStatus::Committed) => {
                    self.events.push(NodeEvent::PrunedCommitted { tx: *tx, proposal });
                    continue;
                }
                Some(TxStatus::Dropped) => continue,
                _ => {}
            }
            self.demote(*tx);
            if self.status(*tx).is_none() {
                self.status.insert(*tx, TxStatus::Pending);
            }
            self.set_status(*tx, TxStatus::Dropped);
            self.endorsed.remove(tx);
            self.waiting.remove(tx);
            self.endorsements.remove(tx);
        }
        for m in members {
            for d in self.dependents.remove(m).unwrap_or_default() {
                for e in self.endorsements.get_mut(&d).into_iter().flat_map(|set| set.values_mut()) {
                    if e.conditions.remove(m) {
                        let mut before = e.clone();
                        before.conditions.insert(*m);
                        self.originals.entry((d, before.endorser)).or_insert(before);
                    }
                }
                self.dirty.insert(d);
            }
        }
        self.check_all(now, out);
        self.retry_waiting(now, out);
    }

    /// Marks the node as back from an outage and starts state transfer.
    pub fn on_recover(&mut self, now: SimTime) -> Outbox {
        let mut out = Outbox::default();
        self.start_sync(now, &mut out);
        out
    }

    /// Ids and endorsement counts for debugging and tests.
    pub fn endorsement_count(&self, tx: TxId) -> usize {
        self.endorsements.get(&tx).map_or(0, |m| m.len())
    }

    pub fn longest_condition_path(&self) -> u32 {
        self.path_len.values().copied().max().unwrap_or(0)
    }
}
/// Preference among differing endorsements from one endorser for one transaction.
fn rank(e: &Endorsement) -> (bool, usize, SimTime, &BTreeSet<TxId>) {
    (!e.conditions.is_empty(), e.conditions.len(), e.sent_time, &e.conditions)
}
