//! Mutually recursive `Applicable` / `Valid` predicates over the condition graph.
//!
//! A transaction is applicable when at least `omega` of its endorsements are
//! valid; an endorsement is valid when none of its conditions is applicable.
//! Accepted endorsements only ever condition on transactions with a strictly
//! earlier deadline, so the recursion descends in deadline order and terminates.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;

use crate::model::{Endorsement, NodeId, TxId, TxStatus};

pub type EndorsementSets = FxHashMap<TxId, BTreeMap<NodeId, Endorsement>>;

/// Memoizing evaluator. Build one per processed event and drop it afterwards:
/// the memo is only sound while the endorsement sets stay unchanged.
pub struct Evaluator<'a> {
    endorsements: &'a EndorsementSets,
    status: &'a FxHashMap<TxId, TxStatus>,
    omega: u32,
    memo: FxHashMap<TxId, bool>,
    depth: usize,
    max_depth: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(endorsements: &'a EndorsementSets, status: &'a FxHashMap<TxId, TxStatus>, omega: u32) -> Self {
        Evaluator { endorsements, status, omega, memo: FxHashMap::default(), depth: 0, max_depth: 0 }
    }

    pub fn applicable(&mut self, tx: TxId) -> bool {
        match self.status.get(&tx) {
            Some(TxStatus::Committed) => return true,
            Some(TxStatus::Dropped) => return false,
            _ => {}
        }
        if let Some(v) = self.memo.get(&tx) {
            return *v;
        }
        self.depth += 1;
        self.max_depth = self.max_depth.max(self.depth);
        let mut valid = 0u32;
        if let Some(set) = self.endorsements.get(&tx) {
            for e in set.values() {
                if self.valid(e) {
                    valid += 1;
                    if valid >= self.omega {
                        break;
                    }
                }
            }
        }
        self.depth -= 1;
        let result = valid >= self.omega;
        self.memo.insert(tx, result);
        result
    }

    pub fn valid(&mut self, e: &Endorsement) -> bool {
        e.conditions.iter().all(|c| !self.applicable(*c))
    }

    /// Deepest `applicable` nesting reached so far.
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SimTime;

    fn e(tx: u128, by: u32, conds: &[u128]) -> Endorsement {
        Endorsement {
            tx_id: TxId::from_u128(tx),
            endorser: NodeId(by),
            conditions: conds.iter().map(|c| TxId::from_u128(*c)).collect(),
            sent_time: SimTime::ZERO,
        }
    }

    fn sets(es: &[Endorsement]) -> EndorsementSets {
        let mut m: EndorsementSets = FxHashMap::default();
        for x in es {
            m.entry(x.tx_id).or_default().insert(x.endorser, x.clone());
        }
        m
    }

    const Q: u128 = 1;
    const R: u128 = 2;

    #[test]
    fn worked_example_before_third_q_endorsement() {
        let g = sets(&[e(Q, 1, &[]), e(Q, 2, &[]), e(R, 1, &[Q]), e(R, 2, &[Q]), e(R, 4, &[])]);
        let status = FxHashMap::default();
        let mut ev = Evaluator::new(&g, &status, 3);
        assert!(!ev.applicable(TxId::from_u128(Q)));
        assert!(ev.applicable(TxId::from_u128(R)));
    }

    #[test]
    fn worked_example_after_third_q_endorsement() {
        let g = sets(&[e(Q, 1, &[]), e(Q, 2, &[]), e(Q, 3, &[]), e(R, 1, &[Q]), e(R, 2, &[Q]), e(R, 4, &[])]);
        let status = FxHashMap::default();
        let mut ev = Evaluator::new(&g, &status, 3);
        assert!(ev.applicable(TxId::from_u128(Q)));
        assert!(!ev.applicable(TxId::from_u128(R)));
    }

    #[test]
    fn terminal_statuses_short_circuit() {
        let g = sets(&[e(R, 1, &[Q]), e(R, 2, &[Q]), e(R, 3, &[Q])]);
        let mut status = FxHashMap::default();
        status.insert(TxId::from_u128(Q), TxStatus::Committed);
        assert!(!Evaluator::new(&g, &status, 3).applicable(TxId::from_u128(R)));
        status.insert(TxId::from_u128(Q), TxStatus::Dropped);
        assert!(Evaluator::new(&g, &status, 3).applicable(TxId::from_u128(R)));
    }

    #[test]
    fn depth_bounded_by_chain_length() {
        let mut es = Vec::new();
        for t in 0..10u128 {
            for by in 0..3 {
                let conds: Vec<u128> = if t == 0 { vec![] } else { vec![t - 1] };
                es.push(e(t, by, &conds));
            }
        }
        let g = sets(&es);
        let status = FxHashMap::default();
        let mut ev = Evaluator::new(&g, &status, 3);
        // chain alternates: 0 applicable, 1 not, 2 applicable, ...
        assert!(!ev.applicable(TxId::from_u128(9)));
        assert_eq!(ev.max_depth(), 10);
        assert!(ev.applicable(TxId::from_u128(8)));
    }
}
