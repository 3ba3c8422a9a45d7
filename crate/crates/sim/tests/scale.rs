use endorsedb_sim::{sweep, RunOptions, Scenario};

#[test]
fn larger_memberships_stay_safe_and_consistent() {
    let base = Scenario::parse(
        r#"
name = "scale"
n = 10
f = 3

[workload]
clients = 10
rate_per_client = 2.0
total_transactions = 150
hotspot_probability = 0.02
"#,
    )
    .unwrap();
    let values: Vec<String> = ["10", "20", "40"].map(String::from).to_vec();
    let opts = RunOptions { check_invariants: true, ..Default::default() };
    let outs = sweep(&base, "n", &values, &[1], opts).unwrap();
    assert_eq!(outs.len(), 3);
    for (out, n) in outs.iter().zip([10u32, 20, 40]) {
        assert_eq!(out.report.n, n);
        assert_eq!(out.report.omega, 2 * n / 3 + 1);
        assert!(out.violations.is_empty(), "n={n}: {:?}", out.violations);
        assert!(out.quiescent);
        let first = out.correct().next().unwrap().store().snapshot();
        assert!(out.correct().all(|node| node.store().snapshot() == first), "n={n}");
        assert!(out.report.committed > 140, "n={n}: {}", out.report.committed);
    }
}
