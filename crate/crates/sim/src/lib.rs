//! Deterministic simulator for the endorsement datastore: network and clock
//! model, Byzantine adversaries, crash/recovery, workloads and metrics.

pub mod adversary;
pub mod invariants;
pub mod latency;
pub mod metrics;
pub mod scenario;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use invariants::{Property, Violation};
pub use metrics::{to_csv, write_csv, MetricsReport, HEADER};
pub use scenario::{Scenario, ScenarioError};
pub use sim::{run, RunOptions, RunOutput};

use rayon::prelude::*;

/// Runs every `(value, seed)` pair of a one-parameter sweep, in parallel.
/// Rows come back ordered by value then seed.
pub fn sweep(
    base: &Scenario,
    param: &str,
    values: &[String],
    seeds: &[u64],
    opts: RunOptions,
) -> Result<Vec<RunOutput>, ScenarioError> {
    let mut points = Vec::new();
    for v in values {
        let mut s = base.clone();
        s.set_param(param, v)?;
        for seed in seeds {
            points.push((s.clone(), *seed));
        }
    }
    points.into_par_iter().map(|(s, seed)| run(&s, seed, opts)).collect()
}
