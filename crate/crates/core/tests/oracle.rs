mod support;

use endorsedb_core::*;
use proptest::prelude::*;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn memoized_matches_naive(inst in instance()) {
        let (g, status) = build(&inst);
        let mut ev = Evaluator::new(&g, &status, inst.omega);
        for i in 0..inst.txs {
            let id = TxId::from_u128(i as u128);
            prop_assert_eq!(ev.applicable(id), naive_applicable(&g, &status, inst.omega, id));
        }
        for set in g.values() {
            for e in set.values() {
                prop_assert_eq!(ev.valid(e), naive_valid(&g, &status, inst.omega, e));
            }
        }
    }
}
