mod support;

use endorsedb_core::*;
use proptest::prelude::*;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    /// Apply then rollback restores the prior view, whatever else is speculative.
    #[test]
    fn rollback_inverts_apply(history in txs(4), speculative in 0usize..4) {
        let mut s = DatastoreState::new();
        for (i, t) in history[..3].iter().enumerate() {
            if i < speculative { s.apply(t).unwrap() } else { s.apply_and_commit(t).unwrap() }
        }
        let before = view(&s);
        let t = &history[3];
        s.apply(t).unwrap();
        s.rollback(t.id).unwrap();
        prop_assert_eq!(view(&s), before);
    }

    /// Committing the same set in any order yields byte-identical snapshots.
    #[test]
    fn commit_order_is_irrelevant(set in txs(4), perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut a = DatastoreState::new();
        let mut b = DatastoreState::new();
        for t in &set {
            a.apply_and_commit(t).unwrap();
        }
        for i in perm {
            b.apply_and_commit(&set[i]).unwrap();
        }
        prop_assert_eq!(a.snapshot(), b.snapshot());
        prop_assert_eq!(view(&a), view(&b));
    }

    #[test]
    fn snapshot_round_trips(set in txs(3)) {
        let mut s = DatastoreState::new();
        for t in &set {
            s.apply_and_commit(t).unwrap();
        }
        let bytes = s.snapshot();
        prop_assert_eq!(DatastoreState::restore(&bytes).unwrap().snapshot(), bytes);
    }
}
