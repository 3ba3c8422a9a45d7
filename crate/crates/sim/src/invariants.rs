//! Safety properties checked after every node step.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use endorsedb_core::{conflicts, Node, NodeEvent, NodeId, ProposalId, SimDuration, SimTime, TxId, TxStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Property {
    LocalSafety,
    Durability,
    Monotonicity,
    AcyclicConditions,
    BvpAgreement,
    BvpValidity,
    BvpTermination,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub at: SimTime,
    pub node: NodeId,
    pub property: Property,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} at {:?}: {}", self.at, self.node, self.property, self.detail)
    }
}

#[derive(Default)]
pub struct Checker {
    active: BTreeMap<NodeId, BTreeSet<TxId>>,
    committed: HashMap<TxId, (SimTime, BTreeSet<NodeId>)>,
    dropped: HashMap<TxId, BTreeSet<NodeId>>,
    started: HashMap<(NodeId, ProposalId), SimTime>,
    decisions: BTreeMap<ProposalId, BTreeMap<NodeId, u8>>,
    pub violations: Vec<Violation>,
}

impl Checker {
    fn flag(&mut self, at: SimTime, node: NodeId, property: Property, detail: String) {
        self.violations.push(Violation { at, node, property, detail });
    }

    /// `at` is global time, `local` the node's clock; `node` is the state after the step.
    pub fn observe(&mut self, at: SimTime, local: SimTime, node: &Node, ev: &NodeEvent) {
        let id = node.id();
        match ev {
            NodeEvent::Status { tx, from, to } => {
                if from.is_some_and(|f| f.is_terminal()) {
                    self.flag(at, id, Property::Monotonicity, format!("{tx:?} left {from:?} for {to:?}"));
                }
                match to {
                    TxStatus::Applicable | TxStatus::Applied => self.enter_active(at, node, *tx),
                    _ => {
                        if let Some(s) = self.active.get_mut(&id) {
                            s.remove(tx);
                        }
                    }
                }
                match to {
                    TxStatus::Committed => {
                        let e = self.committed.entry(*tx).or_insert_with(|| (at, BTreeSet::new()));
                        e.1.insert(id);
                        if self.dropped.get(tx).is_some_and(|d| !d.is_empty()) {
                            self.flag(at, id, Property::Durability, format!("{tx:?} committed after a drop"));
                        }
                    }
                    TxStatus::Dropped => {
                        self.dropped.entry(*tx).or_default().insert(id);
                        if self.committed.get(tx).is_some_and(|c| !c.1.is_empty()) {
                            self.flag(at, id, Property::Durability, format!("{tx:?} dropped after a commit"));
                        }
                    }
                    _ => {}
                }
            }
            NodeEvent::IllegalTransition { tx, from, to } => {
                self.flag(at, id, Property::Monotonicity, format!("{tx:?} refused {from:?} -> {to:?}"));
            }
            NodeEvent::PrunedCommitted { tx, proposal } => {
                self.flag(at, id, Property::Durability, format!("checkpoint {proposal:?} targets committed {tx:?}"));
            }
            NodeEvent::EndorsementAccepted { tx, endorser, .. } => {
                let known = node.known();
                let Some(target) = known.get(tx) else { return };
                if let Some(e) = node.endorsements_for(*tx).find(|e| e.endorser == *endorser) {
                    for c in &e.conditions {
                        if known.get(c).is_none_or(|c| c.deadline >= target.deadline) {
                            self.flag(at, id, Property::AcyclicConditions, format!("{tx:?} conditioned on {c:?}"));
                        }
                    }
                }
            }
            NodeEvent::BvpStarted { proposal, .. } => {
                self.started.insert((id, *proposal), at);
            }
            NodeEvent::BvpDecided { proposal, decision, bound, .. } => {
                if local > *bound {
                    self.flag(at, id, Property::BvpTermination, format!("{proposal:?} decided at {local} > {bound}"));
                }
                let decided = self.decisions.entry(*proposal).or_default();
                decided.insert(id, *decision);
                if decided.values().any(|d| d != decision) {
                    let detail = format!("{proposal:?} split {decided:?}");
                    self.flag(at, id, Property::BvpAgreement, detail);
                }
                if *decision == 1 {
                    let start = self.started.get(&(id, *proposal)).copied().unwrap_or(at);
                    let members =
                        node.instances().get(proposal).map(|i| i.proposal.members.clone()).unwrap_or_default();
                    for m in members {
                        if self.committed.get(&m).is_some_and(|(first, _)| *first <= start) {
                            self.flag(at, id, Property::BvpValidity, format!("{proposal:?} prunes committed {m:?}"));
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn enter_active(&mut self, at: SimTime, node: &Node, tx: TxId) {
        let id = node.id();
        let set = self.active.entry(id).or_default();
        if !set.insert(tx) {
            return;
        }
        let known = node.known();
        let Some(t) = known.get(&tx) else { return };
        if self.committed.contains_key(&tx) {
            return;
        }
        let clash: Vec<TxId> = set
            .iter()
            .filter(|o| **o != tx && !self.committed.contains_key(o))
            .filter(|o| known.get(o).is_some_and(|o| conflicts(&o.ops, &t.ops)))
            .copied()
            .collect();
        for o in clash {
            self.flag(at, id, Property::LocalSafety, format!("{tx:?} and {o:?} both applicable"));
        }
    }

    /// Flags instances still open past their bound when the run ends.
    pub fn finish(&mut self, at: SimTime, tau_hat: SimDuration, local: impl Fn(NodeId) -> SimTime, nodes: &[&Node]) {
        for node in nodes {
            for (pid, inst) in node.instances() {
                if inst.decision.is_none() && local(node.id()) > inst.bound(tau_hat) {
                    self.flag(at, node.id(), Property::BvpTermination, format!("{pid:?} never decided"));
                }
            }
        }
    }

    pub fn decisions(&self) -> &BTreeMap<ProposalId, BTreeMap<NodeId, u8>> {
        &self.decisions
    }
}
