//! Update-only workload: independent Poisson clients writing one key each.

use endorsedb_core::{NodeId, Operation, SimDuration, SimTime, Transaction, TxId};
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::scenario::WorkloadConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Submission {
    pub at: SimTime,
    pub via: NodeId,
    pub tx: Transaction,
    pub hotspot: bool,
}

pub fn key_name(i: u32) -> String {
    format!("user{i}")
}

/// Arrivals sorted by time. `gateways` are the correct nodes clients talk to.
pub fn generate<R: Rng>(cfg: &WorkloadConfig, gateways: &[NodeId], rng: &mut R) -> Vec<Submission> {
    assert!(!gateways.is_empty(), "workload needs a gateway");
    let start = SimTime::from_millis(cfg.start_ms);
    let end = cfg.duration_ms.map(|d| start + SimDuration::from_millis(d));
    let gap = Exp::new(cfg.rate_per_client).expect("positive rate");
    let mut arrivals: Vec<(SimTime, u32)> = Vec::new();
    for client in 0..cfg.clients {
        let mut t = 0f64;
        for _ in 0..cfg.total_transactions {
            t += gap.sample(rng);
            let at = start + SimDuration((t * 1e6).round() as i64);
            if end.is_some_and(|e| at > e) {
                break;
            }
            arrivals.push((at, client));
        }
    }
    arrivals.sort();
    arrivals.truncate(cfg.total_transactions as usize);

    let offset = SimDuration::from_millis(cfg.deadline_offset_ms);
    let cold = cfg.keyspace_size - cfg.hotspot_keys;
    arrivals
        .into_iter()
        .enumerate()
        .map(|(i, (at, client))| {
            let hotspot = cfg.hotspot_probability > 0.0 && rng.random::<f64>() < cfg.hotspot_probability;
            let key = if hotspot || cold == 0 {
                rng.random_range(0..cfg.hotspot_keys)
            } else {
                cfg.hotspot_keys + rng.random_range(0..cold)
            };
            let via = gateways[client as usize % gateways.len()];
            let tx = Transaction {
                id: TxId(rng.random()),
                deadline: at + offset,
                preconditions: vec![],
                ops: vec![Operation::Put { key: key_name(key), value: (i as u64).to_be_bytes().to_vec() }],
                submitter: via,
                submit_time: at,
            };
            Submission { at, via, tx, hotspot }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: f64, total: u32) -> WorkloadConfig {
        WorkloadConfig {
            clients: 10,
            rate_per_client: 2.0,
            keyspace_size: 100,
            hotspot_probability: p,
            hotspot_keys: 1,
            total_transactions: total,
            deadline_offset_ms: 5_000,
            start_ms: 0,
            duration_ms: None,
        }
    }

    #[test]
    fn sorted_with_deadlines_and_gateways() {
        let gw = [NodeId(0), NodeId(2)];
        let subs = generate(&cfg(0.2, 200), &gw, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(subs.len(), 200);
        assert!(subs.windows(2).all(|w| w[0].at <= w[1].at));
        for s in &subs {
            assert_eq!(s.tx.deadline, s.at + SimDuration::from_secs(5));
            assert!(gw.contains(&s.via));
            assert_eq!(s.hotspot, s.tx.ops[0].key() == "user0");
        }
    }

    #[test]
    fn zero_hotspot_never_hits() {
        let subs = generate(&cfg(0.0, 2_000), &[NodeId(0)], &mut ChaCha8Rng::seed_from_u64(2));
        assert!(subs.iter().all(|s| !s.hotspot && s.tx.ops[0].key() != "user0"));
    }
}
