use endorsedb_core::{NodeEvent, NodeId, TxId};
use endorsedb_sim::adversary::forged_snapshot;
use endorsedb_sim::{run, RunOptions, Scenario};

const LIARS: &str = r#"
name = "recovery"
n = 10
f = 3

[[adversary]]
node = 7
[[adversary]]
node = 8
[[adversary]]
node = 9

[[crash]]
node = 0
at_ms = 2000
down_ms = 6000

[workload]
clients = 10
rate_per_client = 2.0
total_transactions = 300
hotspot_probability = 0.05
"#;

fn opts() -> RunOptions {
    RunOptions { check_invariants: true, trace: false, record_history: true }
}

#[test]
fn recovering_node_ignores_forged_snapshots() {
    let s = Scenario::parse(LIARS).unwrap();
    for seed in 1..=3 {
        let out = run(&s, seed, opts()).unwrap();
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert!(out.quiescent);
        let adopted =
            out.history.iter().any(|(_, n, ev)| *n == NodeId(0) && matches!(ev, NodeEvent::SnapshotAdopted { .. }));
        assert!(adopted, "seed {seed}: node 0 never adopted a snapshot");
        let forged = forged_snapshot();
        let reference = out.nodes[&NodeId(1)].store().snapshot();
        for n in out.correct() {
            assert!(!n.store().is_committed(TxId([0xee; 16])));
            assert_ne!(n.store().snapshot(), forged);
            assert_eq!(n.store().snapshot(), reference, "seed {seed}: {} diverged", n.id());
        }
        assert_eq!(out.report.non_terminal, 0, "seed {seed}");
    }
}

#[test]
fn unreachable_quorum_falls_back_to_local_state() {
    // Eight identical replies exceed what the six honest peers can supply, so
    // the node gives up and continues from its retained state.
    let mut s = Scenario::parse(LIARS).unwrap();
    s.recovery_quorum = Some(8);
    let out = run(&s, 1, opts()).unwrap();
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    let node = &out.nodes[&NodeId(0)];
    assert!(!node.is_syncing());
    assert!(!node.store().is_committed(TxId([0xee; 16])));
}
