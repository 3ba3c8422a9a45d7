//! Scripted Byzantine endorsers.
//!
//! Every non-silent adversary endorses each transaction it hears about
//! unconditionally, which is the most damaging honest-looking vote. Behaviors
//! layer timing and content faults on top of that baseline.

use std::collections::BTreeMap;

use endorsedb_core::{
    DatastoreState, Endorsement, Message, NodeId, Operation, SimDuration, SimTime, Transaction, TxId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    Silent,
    DelayEndorsements {
        delay_ms: i64,
    },
    /// Different condition sets to different peers.
    Equivocate,
    /// Submits conflicting writes on the hottest key at `rate` tx/s.
    FloodConflicts {
        rate: f64,
    },
    /// Conditions pointing at transactions that do not expire earlier.
    LateConditionViolation,
    /// Endorses only after the deadline has passed.
    PostDeadlineEndorse,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Broadcast(Message),
    /// One payload per recipient; the network reconciles it for correct peers.
    PerRecipient(Vec<(NodeId, Message)>),
    Send(NodeId, Message),
}

pub const FLOOD_KEY: &str = "user0";

pub struct Adversary {
    pub id: NodeId,
    behaviors: Vec<Behavior>,
    peers: Vec<NodeId>,
    known: BTreeMap<TxId, Transaction>,
    rng: ChaCha8Rng,
    flood_seq: u64,
    deadline_offset: SimDuration,
}

impl Adversary {
    pub fn new(
        id: NodeId,
        behaviors: Vec<Behavior>,
        peers: Vec<NodeId>,
        seed: u64,
        deadline_offset: SimDuration,
    ) -> Self {
        Adversary {
            id,
            behaviors,
            peers,
            known: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            flood_seq: 0,
            deadline_offset,
        }
    }

    fn has(&self, b: impl Fn(&Behavior) -> bool) -> bool {
        self.behaviors.iter().any(b)
    }

    pub fn is_silent(&self) -> bool {
        self.has(|b| matches!(b, Behavior::Silent))
    }

    pub fn flood_rate(&self) -> Option<f64> {
        self.behaviors.iter().find_map(|b| match b {
            Behavior::FloodConflicts { rate } if *rate > 0.0 => Some(*rate),
            _ => None,
        })
    }

    fn delay(&self) -> SimDuration {
        self.behaviors
            .iter()
            .filter_map(|b| match b {
                Behavior::DelayEndorsements { delay_ms } => Some(SimDuration::from_millis(*delay_ms)),
                _ => None,
            })
            .max()
            .unwrap_or(SimDuration::ZERO)
    }

    /// Reactions to one delivered message, each with a delay before it is sent.
    pub fn on_message(&mut self, now: SimTime, from: NodeId, msg: &Message) -> Vec<(SimDuration, Action)> {
        if self.is_silent() {
            return vec![];
        }
        match msg {
            Message::Transaction(t) if !self.known.contains_key(&t.id) => {
                self.known.insert(t.id, t.clone());
                self.endorse(now, t)
            }
            Message::SnapshotRequest if from != self.id => {
                vec![(SimDuration::ZERO, Action::Send(from, Message::SnapshotReply { snapshot: forged_snapshot() }))]
            }
            _ => vec![],
        }
    }

    fn endorse(&mut self, now: SimTime, t: &Transaction) -> Vec<(SimDuration, Action)> {
        let mut delay = self.delay();
        if self.has(|b| matches!(b, Behavior::PostDeadlineEndorse)) {
            let after = t.deadline + SimDuration::from_millis(1) - now;
            delay = delay.max(after);
        }
        let sent_time = now + delay;
        let mut conditions = Default::default();
        if self.has(|b| matches!(b, Behavior::LateConditionViolation)) {
            // Any transaction that does not expire strictly earlier, falling back to itself.
            let late = self.known.values().filter(|c| c.deadline >= t.deadline).map(|c| c.id).max().unwrap_or(t.id);
            conditions = [late].into();
        }
        let base = Endorsement { tx_id: t.id, endorser: self.id, conditions, sent_time };
        if !self.has(|b| matches!(b, Behavior::Equivocate)) {
            return vec![(delay, Action::Broadcast(Message::Endorsement(base)))];
        }
        let earlier: Vec<TxId> =
            self.known.values().filter(|c| c.id != t.id && c.deadline < t.deadline).map(|c| c.id).collect();
        let alt_conditions = if earlier.is_empty() {
            Default::default()
        } else {
            [earlier[self.rng.random_range(0..earlier.len())]].into()
        };
        let alt = Endorsement { conditions: alt_conditions, sent_time: sent_time - SimDuration::TICK, ..base.clone() };
        let split = self
            .peers
            .iter()
            .map(|p| {
                let e = if p.0 % 2 == 0 { base.clone() } else { alt.clone() };
                (*p, Message::Endorsement(e))
            })
            .collect();
        vec![
            (delay, Action::PerRecipient(split)),
            (delay + SimDuration::from_millis(50), Action::Broadcast(Message::Endorsement(alt))),
        ]
    }

    /// One conflicting write on the flood key, endorsed by its author.
    pub fn flood_tick(&mut self, now: SimTime) -> (Vec<(SimDuration, Action)>, SimDuration) {
        let rate = self.flood_rate().expect("flooding adversary");
        self.flood_seq += 1;
        let t = Transaction {
            id: TxId(self.rng.random()),
            deadline: now + self.deadline_offset,
            preconditions: vec![],
            ops: vec![Operation::Put { key: FLOOD_KEY.into(), value: self.flood_seq.to_be_bytes().to_vec() }],
            submitter: self.id,
            submit_time: now,
        };
        self.known.insert(t.id, t.clone());
        let mut actions = vec![(SimDuration::ZERO, Action::Broadcast(Message::Transaction(t.clone())))];
        actions.extend(self.endorse(now, &t));
        let gap = Exp::new(rate).expect("positive rate").sample(&mut self.rng);
        (actions, SimDuration(((gap * 1e6).round() as i64).max(1)))
    }
}

/// The same fabricated state from every liar, so they agree with each other.
pub fn forged_snapshot() -> Vec<u8> {
    let mut s = DatastoreState::new();
    let t = Transaction {
        id: TxId([0xee; 16]),
        deadline: SimTime::ZERO,
        preconditions: vec![],
        ops: vec![Operation::Put { key: FLOOD_KEY.into(), value: b"forged".to_vec() }],
        submitter: NodeId(u32::MAX),
        submit_time: SimTime::ZERO,
    };
    s.apply_and_commit(&t).expect("fresh store");
    s.snapshot()
}
