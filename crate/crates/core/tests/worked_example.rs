//! Two conflicting writes where a late endorsement flips which one survives.
//! Delivery is driven by hand so every intermediate status can be asserted.

use std::collections::BTreeSet;

use endorsedb_core::*;

const Q: u128 = 0xa;
const R: u128 = 0xb;

struct Harness {
    nodes: Vec<Node>,
    /// Messages waiting for nodes that are cut off.
    held: Vec<(usize, NodeId, Message)>,
    timers: Vec<(usize, SimTime, Timer)>,
    online: Vec<bool>,
}

impl Harness {
    fn new() -> Self {
        let system = SystemConfig::new(4, 1, 3).unwrap();
        let sync = SynchronyEstimator::uniform(4, SimDuration::from_secs(10), SimDuration::from_secs(2));
        let nodes = (0..4)
            .map(|i| {
                let mut cfg = NodeConfig::new(NodeId(i));
                cfg.speculative = true;
                if i == 3 {
                    cfg.policy = EndorsementPolicy::DenyValues { values: [b"q".to_vec()].into() };
                }
                Node::new(system.clone(), cfg, sync.clone())
            })
            .collect();
        Harness { nodes, held: vec![], timers: vec![], online: vec![true, true, false, true] }
    }

    fn absorb(&mut self, from: usize, out: Outbox, queue: &mut Vec<(usize, NodeId, Message)>) {
        for m in out.broadcasts {
            for to in 0..self.nodes.len() {
                queue.push((to, NodeId(from as u32), m.clone()));
            }
        }
        for (to, m) in out.sends {
            queue.push((to.0 as usize, NodeId(from as u32), m));
        }
        for (at, t) in out.timers {
            self.timers.push((from, at, t));
        }
    }

    /// Delivers until quiescent at a single instant; cut-off nodes keep their mail.
    fn settle(&mut self, now: SimTime, mut queue: Vec<(usize, NodeId, Message)>) {
        while !queue.is_empty() {
            let (to, from, msg) = queue.remove(0);
            if !self.online[to] {
                self.held.push((to, from, msg));
                continue;
            }
            let out = self.nodes[to].on_message(now, from, msg);
            self.absorb(to, out, &mut queue);
        }
    }

    fn submit(&mut self, now: SimTime, via: usize, t: Transaction) {
        let mut q = vec![];
        for to in 0..4 {
            q.push((to, NodeId(via as u32), Message::Transaction(t.clone())));
        }
        self.settle(now, q);
    }

    fn advance(&mut self, now: SimTime) {
        loop {
            self.timers.sort_by_key(|(n, at, _)| (*at, *n));
            let Some(pos) = self.timers.iter().position(|(n, at, _)| *at <= now && self.online[*n]) else {
                break;
            };
            let (n, at, t) = self.timers.remove(pos);
            let out = self.nodes[n].on_timer(at.max(SimTime::ZERO), t);
            let mut q = vec![];
            self.absorb(n, out, &mut q);
            self.settle(at, q);
        }
    }

    fn reconnect(&mut self, now: SimTime, node: usize) {
        self.online[node] = true;
        let (mine, rest): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.held).into_iter().partition(|(to, _, _)| *to == node);
        self.held = rest;
        self.settle(now, mine);
    }

    fn status(&self, node: usize, tx: u128) -> Option<TxStatus> {
        self.nodes[node].status(TxId::from_u128(tx))
    }
}

fn put(id: u128, value: &[u8], deadline_ms: i64, submit_ms: i64, via: u32) -> Transaction {
    Transaction {
        id: TxId::from_u128(id),
        deadline: SimTime::from_millis(deadline_ms),
        preconditions: vec![],
        ops: vec![Operation::Put { key: "x".into(), value: value.to_vec() }],
        submitter: NodeId(via),
        submit_time: SimTime::from_millis(submit_ms),
    }
}

#[test]
fn late_endorsement_reverses_speculation_and_checkpoint_drops_loser() {
    let mut h = Harness::new();
    h.submit(SimTime::ZERO, 0, put(Q, b"q", 2_000, 0, 0));
    assert_eq!(h.status(0, Q), Some(TxStatus::Pending));
    assert_eq!(h.nodes[0].endorsement_count(TxId::from_u128(Q)), 2);

    h.submit(SimTime::from_millis(100), 1, put(R, b"r", 3_000, 100, 1));
    // p3 endorsed r unconditionally; p0 and p1 wait for q to expire.
    assert_eq!(h.nodes[0].endorsement_count(TxId::from_u128(R)), 1);

    h.advance(SimTime::from_millis(2_000));
    let conds: Vec<BTreeSet<TxId>> =
        h.nodes[0].endorsements_for(TxId::from_u128(R)).map(|e| e.conditions.clone()).collect();
    assert_eq!(conds.iter().filter(|c| c.contains(&TxId::from_u128(Q))).count(), 2);
    for n in [0, 1, 3] {
        assert_eq!(h.status(n, Q), Some(TxStatus::Pending));
        assert_eq!(h.status(n, R), Some(TxStatus::Applied), "node {n}");
        assert_eq!(h.nodes[n].store().get("x").value, Some(Value::Bytes(b"r".to_vec())));
    }

    // p2 comes back; its clock lags so q has not expired locally.
    h.reconnect(SimTime::from_millis(1_300), 2);
    for n in 0..4 {
        assert_eq!(h.status(n, Q), Some(TxStatus::Committed), "node {n}");
        assert_eq!(h.status(n, R), Some(TxStatus::Pending), "node {n}");
        assert_eq!(h.nodes[n].store().get("x").value, Some(Value::Bytes(b"q".to_vec())));
    }

    // r is never applicable again; after the old delay a checkpoint drops it.
    h.advance(SimTime::from_secs(30));
    for n in 0..4 {
        assert_eq!(h.status(n, R), Some(TxStatus::Dropped), "node {n}");
        assert!(h.nodes[n].instances().values().all(|i| i.decision == Some(1)));
    }
    let snaps: Vec<Vec<u8>> = h.nodes.iter().map(|n| n.store().snapshot()).collect();
    assert!(snaps.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn checkpoint_on_applicable_member_is_vetoed_with_evidence() {
    let mut h = Harness::new();
    let system = SystemConfig::new(4, 1, 3).unwrap();
    let sync = SynchronyEstimator::uniform(4, SimDuration::from_secs(10), SimDuration::from_secs(2));
    let mut deny = NodeConfig::new(NodeId(2));
    deny.policy = EndorsementPolicy::DenyValues { values: [b"q".to_vec()].into() };
    h.nodes[2] = Node::new(system.clone(), deny, sync.clone());
    h.nodes[3] = Node::new(system, NodeConfig::new(NodeId(3)), sync);

    // Only p3 hears its own endorsement of q, so only p3 reaches the quorum.
    h.online = vec![false, false, false, true];
    h.submit(SimTime::ZERO, 3, put(Q, b"q", 2_000, 0, 3));
    h.online = vec![true; 4];
    let held: Vec<_> = std::mem::take(&mut h.held)
        .into_iter()
        .filter(|(_, from, m)| !(from.0 == 3 && matches!(m, Message::Endorsement(_))))
        .collect();
    h.settle(SimTime::ZERO, held);
    assert_eq!(h.status(3, Q), Some(TxStatus::Committed));
    for n in 0..3 {
        assert_eq!(h.status(n, Q), Some(TxStatus::Pending), "node {n}");
    }

    // A proposal to drop q: p3 vetoes at once and its evidence lifts the others.
    let p = CheckpointProposal::new([TxId::from_u128(Q)].into(), NodeId(0), SimTime::from_secs(5));
    let q = (0..4).map(|to| (to, NodeId(0), Message::Checkpoint(p.clone()))).collect();
    h.settle(SimTime::from_secs(5), q);
    for n in 0..4 {
        assert_eq!(h.nodes[n].instances()[&p.id].decision, Some(0), "node {n}");
        assert_eq!(h.status(n, Q), Some(TxStatus::Committed), "node {n}");
    }
}
