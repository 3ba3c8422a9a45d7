//! Per-transaction timelines and the aggregated report written as CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use endorsedb_core::{NodeEvent, NodeId, ProposalId, SimTime, TxId, TxStatus};
use serde::Serialize;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TxRecord {
    pub submit: SimTime,
    pub hotspot: bool,
    pub applied: BTreeMap<NodeId, SimTime>,
    pub committed: BTreeMap<NodeId, SimTime>,
    pub dropped: BTreeMap<NodeId, SimTime>,
    pub committed_during_checkpoint: bool,
}

/// Folds node events from correct nodes into per-transaction records.
#[derive(Clone, Debug, Default)]
pub struct Collector {
    pub correct: BTreeSet<NodeId>,
    pub records: BTreeMap<TxId, TxRecord>,
    pub applications: u64,
    pub rollbacks: u64,
    pub checkpoints: BTreeSet<ProposalId>,
    open: BTreeMap<NodeId, BTreeSet<ProposalId>>,
    pub longest_path: u32,
    pub max_eval_depth: usize,
    pub suspects: u64,
    pub events: u64,
}

impl Collector {
    pub fn new(correct: BTreeSet<NodeId>) -> Self {
        Collector { correct, ..Default::default() }
    }

    /// Registers a client transaction; only these count toward latency and drop rate.
    pub fn submitted(&mut self, tx: TxId, at: SimTime, hotspot: bool) {
        self.records.entry(tx).or_insert_with(|| TxRecord { submit: at, hotspot, ..Default::default() });
    }

    pub fn observe(&mut self, at: SimTime, node: NodeId, ev: &NodeEvent) {
        self.events += 1;
        match ev {
            NodeEvent::Applied(tx) => {
                self.applications += 1;
                if let Some(r) = self.records.get_mut(tx) {
                    r.applied.entry(node).or_insert(at);
                }
            }
            NodeEvent::RolledBack(_) => self.rollbacks += 1,
            NodeEvent::Status { tx, to, .. } => {
                let open = self.open.get(&node).is_some_and(|s| !s.is_empty());
                if let Some(r) = self.records.get_mut(tx) {
                    match to {
                        TxStatus::Committed => {
                            r.committed.entry(node).or_insert(at);
                            r.committed_during_checkpoint |= open;
                        }
                        TxStatus::Dropped => {
                            r.dropped.entry(node).or_insert(at);
                        }
                        _ => {}
                    }
                }
            }
            NodeEvent::EndorsementAccepted { path_len, .. } => self.longest_path = self.longest_path.max(*path_len),
            NodeEvent::EvalDepth(d) => self.max_eval_depth = self.max_eval_depth.max(*d),
            NodeEvent::Suspect { .. } => self.suspects += 1,
            NodeEvent::BvpStarted { proposal, .. } => {
                self.checkpoints.insert(*proposal);
                self.open.entry(node).or_default().insert(*proposal);
            }
            NodeEvent::BvpDecided { proposal, .. } => {
                if let Some(s) = self.open.get_mut(&node) {
                    s.remove(proposal);
                }
            }
            _ => {}
        }
    }

    pub fn report(&self, meta: RunMeta, violations: usize) -> MetricsReport {
        let all = self.correct.len();
        let mut commit_lat = Vec::new();
        let mut applied_lat = Vec::new();
        let (mut committed, mut dropped, mut non_terminal, mut during) = (0u64, 0u64, 0u64, 0u64);
        let mut last_commit = None::<SimTime>;
        let first_submit = self.records.values().map(|r| r.submit).min();
        for r in self.records.values() {
            if !r.dropped.is_empty() {
                dropped += 1;
            } else if !r.committed.is_empty() {
                committed += 1;
                during += r.committed_during_checkpoint as u64;
            } else {
                non_terminal += 1;
            }
            if r.committed.len() == all && all > 0 {
                let done = *r.committed.values().max().expect("non-empty");
                commit_lat.push((done - r.submit).as_millis_f64());
                last_commit = last_commit.max(Some(done));
            }
            if r.applied.len() == all && all > 0 {
                let done = *r.applied.values().max().expect("non-empty");
                applied_lat.push((done - r.submit).as_millis_f64());
            }
        }
        commit_lat.sort_by(f64::total_cmp);
        let terminal = committed + dropped;
        let throughput = match (first_submit, last_commit) {
            (Some(a), Some(b)) if b > a => Some(commit_lat.len() as f64 / (b - a).as_millis_f64() * 1e3),
            _ => None,
        };
        MetricsReport {
            scenario: meta.scenario,
            seed: meta.seed,
            n: meta.n,
            f: meta.f,
            omega: meta.omega,
            clients: meta.clients,
            hotspot_probability: fmt(Some(meta.hotspot_probability)),
            speculative: meta.speculative,
            submitted: self.records.len() as u64,
            committed,
            dropped,
            non_terminal,
            drop_rate: fmt((terminal > 0).then(|| dropped as f64 / terminal as f64)),
            commit_latency_mean_ms: fmt(mean(&commit_lat)),
            commit_latency_median_ms: fmt(nearest_rank(&commit_lat, 0.5)),
            commit_latency_p95_ms: fmt(nearest_rank(&commit_lat, 0.95)),
            applied_latency_mean_ms: fmt(mean(&applied_lat)),
            throughput_tps: fmt(throughput),
            applications: self.applications,
            rollbacks: self.rollbacks,
            rollback_ratio: fmt((self.applications > 0).then(|| self.rollbacks as f64 / self.applications as f64)),
            checkpoints: self.checkpoints.len() as u64,
            commits_during_checkpoint: during,
            longest_path: self.longest_path,
            max_eval_depth: self.max_eval_depth as u64,
            suspects: self.suspects,
            violations: violations as u64,
            events: self.events,
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `sorted` must be ascending.
fn nearest_rank(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub scenario: String,
    pub seed: u64,
    pub n: u32,
    pub f: u32,
    pub omega: u32,
    pub clients: u32,
    pub hotspot_probability: f64,
    pub speculative: bool,
}

/// One CSV row. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub n: u32,
    pub f: u32,
    pub omega: u32,
    pub clients: u32,
    pub hotspot_probability: String,
    pub speculative: bool,
    pub submitted: u64,
    pub committed: u64,
    pub dropped: u64,
    pub non_terminal: u64,
    pub drop_rate: String,
    pub commit_latency_mean_ms: String,
    pub commit_latency_median_ms: String,
    pub commit_latency_p95_ms: String,
    pub applied_latency_mean_ms: String,
    pub throughput_tps: String,
    pub applications: u64,
    pub rollbacks: u64,
    pub rollback_ratio: String,
    pub checkpoints: u64,
    pub commits_during_checkpoint: u64,
    pub longest_path: u32,
    pub max_eval_depth: u64,
    pub suspects: u64,
    pub violations: u64,
    pub events: u64,
}

impl MetricsReport {
    pub fn num(s: &str) -> Option<f64> {
        s.parse().ok()
    }

    pub fn drop_rate(&self) -> Option<f64> {
        Self::num(&self.drop_rate)
    }

    pub fn rollback_ratio(&self) -> Option<f64> {
        Self::num(&self.rollback_ratio)
    }

    pub fn commit_latency_mean(&self) -> Option<f64> {
        Self::num(&self.commit_latency_mean_ms)
    }

    pub fn applied_latency_mean(&self) -> Option<f64> {
        Self::num(&self.applied_latency_mean_ms)
    }
}

pub const HEADER: &str = "scenario,seed,n,f,omega,clients,hotspot_probability,speculative,submitted,committed,dropped,\
non_terminal,drop_rate,commit_latency_mean_ms,commit_latency_median_ms,commit_latency_p95_ms,applied_latency_mean_ms,\
throughput_tps,applications,rollbacks,rollback_ratio,checkpoints,commits_during_checkpoint,longest_path,max_eval_depth,\
suspects,violations,events";

pub fn write_csv<W: Write>(out: W, rows: &[MetricsReport]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if rows.is_empty() {
        w.write_record(HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv(rows: &[MetricsReport]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("in-memory csv");
    String::from_utf8(buf).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            scenario: "t".into(),
            seed: 1,
            n: 4,
            f: 1,
            omega: 3,
            clients: 1,
            hotspot_probability: 0.0,
            speculative: true,
        }
    }

    fn collector() -> Collector {
        Collector::new((0..4).map(NodeId).collect())
    }

    fn status(to: TxStatus, tx: TxId) -> NodeEvent {
        NodeEvent::Status { tx, from: None, to }
    }

    #[test]
    fn single_commit_latency() {
        let mut c = collector();
        let tx = TxId::from_u128(1);
        c.submitted(tx, SimTime::ZERO, false);
        for n in 0..4 {
            c.observe(SimTime::from_millis(100 + 10 * n as i64), NodeId(n), &status(TxStatus::Committed, tx));
        }
        let r = c.report(meta(), 0);
        assert_eq!(r.commit_latency_mean_ms, "130.000000");
        assert_eq!(r.drop_rate(), Some(0.0));
    }

    #[test]
    fn drop_rate_over_terminal() {
        let mut c = collector();
        for i in 0..1000u128 {
            let tx = TxId::from_u128(i);
            c.submitted(tx, SimTime::ZERO, false);
            let to = if i < 23 { TxStatus::Dropped } else { TxStatus::Committed };
            c.observe(SimTime::from_millis(5), NodeId(0), &status(to, tx));
        }
        let r = c.report(meta(), 0);
        assert_eq!((r.committed, r.dropped, r.non_terminal), (977, 23, 0));
        assert_eq!(r.drop_rate, "0.023000");
    }

    #[test]
    fn percentiles_are_ordered() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.5), Some(10.0));
        assert_eq!(nearest_rank(&v, 0.95), Some(19.0));
        assert_eq!(nearest_rank(&[], 0.5), None);
    }

    #[test]
    fn empty_report_has_blank_rates() {
        let r = collector().report(meta(), 0);
        assert_eq!(r.submitted, 0);
        assert_eq!(r.drop_rate, "");
        assert_eq!(to_csv(&[]), format!("{HEADER}\n"));
    }
}
