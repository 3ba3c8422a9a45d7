//! Oracles and generators shared by the core tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use endorsedb_core::*;
use proptest::prelude::*;

/// Straight mutual recursion, no memo, no early exit.
pub fn naive_applicable(g: &EndorsementSets, status: &TxMap<TxStatus>, omega: u32, tx: TxId) -> bool {
    match status.get(&tx) {
        Some(TxStatus::Committed) => true,
        Some(TxStatus::Dropped) => false,
        _ => {
            let valid =
                g.get(&tx).map(|set| set.values().filter(|e| naive_valid(g, status, omega, e)).count()).unwrap_or(0);
            valid as u32 >= omega
        }
    }
}

pub fn naive_valid(g: &EndorsementSets, status: &TxMap<TxStatus>, omega: u32, e: &Endorsement) -> bool {
    e.conditions.iter().all(|c| !naive_applicable(g, status, omega, *c))
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub txs: usize,
    pub omega: u32,
    /// (tx, endorser, condition bitmask over lower-indexed txs)
    pub endorsements: Vec<(usize, u32, u8)>,
    pub status: Vec<u8>,
}

pub fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=6, 1u32..=4).prop_flat_map(|(txs, endorsers)| {
        let e = proptest::collection::vec((0..txs, 0..endorsers, any::<u8>()), 0..=txs * endorsers as usize);
        let s = proptest::collection::vec(0u8..8, txs);
        (Just(txs), 1..=endorsers, e, s).prop_map(|(txs, omega, endorsements, status)| Instance {
            txs,
            omega,
            endorsements,
            status,
        })
    })
}

pub fn build(inst: &Instance) -> (EndorsementSets, TxMap<TxStatus>) {
    let mut g: EndorsementSets = TxMap::default();
    for (tx, by, mask) in &inst.endorsements {
        // Conditions only point at strictly earlier transactions, as the filter enforces.
        let conditions: BTreeSet<TxId> =
            (0..*tx).filter(|c| mask & (1 << c) != 0).map(|c| TxId::from_u128(c as u128)).collect();
        let e = Endorsement {
            tx_id: TxId::from_u128(*tx as u128),
            endorser: NodeId(*by),
            conditions,
            sent_time: SimTime::ZERO,
        };
        g.entry(e.tx_id).or_insert_with(BTreeMap::new).insert(e.endorser, e);
    }
    let status = (0..inst.txs)
        .filter_map(|i| {
            let s = match inst.status[i] {
                0 => TxStatus::Committed,
                1 => TxStatus::Dropped,
                _ => return None,
            };
            Some((TxId::from_u128(i as u128), s))
        })
        .collect();
    (g, status)
}

pub fn op() -> impl Strategy<Value = Operation> {
    let key = prop::sample::select(vec!["a", "b", "c"]).prop_map(str::to_owned);
    prop_oneof![
        (key.clone(), prop::collection::vec(any::<u8>(), 0..4)).prop_map(|(key, value)| Operation::Put { key, value }),
        (key.clone(), -5i64..5).prop_map(|(key, delta)| Operation::Increment { key, delta }),
        key.prop_map(|key| Operation::Delete { key }),
    ]
}

pub fn tx(id: u128, deadline: i64, ops: Vec<Operation>) -> Transaction {
    Transaction {
        id: TxId::from_u128(id),
        deadline: SimTime(deadline),
        preconditions: vec![],
        ops,
        submitter: NodeId(0),
        submit_time: SimTime::ZERO,
    }
}

pub fn txs(n: usize) -> impl Strategy<Value = Vec<Transaction>> {
    prop::collection::vec((0i64..20, prop::collection::vec(op(), 1..4)), n)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (d, ops))| tx(i as u128 + 1, d, ops)).collect())
}

pub fn view(s: &DatastoreState) -> Vec<(String, Entry)> {
    s.entries().map(|(k, e)| (k.to_owned(), e)).collect()
}

/// Each link holds `omega` endorsements conditioned on its predecessor and a
/// few unconditional stragglers, so every level must be resolved.
pub fn chain(len: u128, omega: u32, endorsers: u32) -> EndorsementSets {
    let mut g: EndorsementSets = TxMap::default();
    for t in 0..len {
        let set = g.entry(TxId::from_u128(t)).or_insert_with(BTreeMap::new);
        for by in 0..endorsers {
            let conditions = if t == 0 || by >= omega { Default::default() } else { [TxId::from_u128(t - 1)].into() };
            set.insert(
                NodeId(by),
                Endorsement { tx_id: TxId::from_u128(t), endorser: NodeId(by), conditions, sent_time: SimTime::ZERO },
            );
        }
    }
    g
}
