//! Single-threaded discrete-event run of one (scenario, seed).

use std::collections::{BTreeMap, BTreeSet};

use endorsedb_core::{
    Message, Node, NodeConfig, NodeEvent, NodeId, Operation, Outbox, SimDuration, SimTime, SynchronyEstimator, Timer,
    Transaction, TxId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adversary::{Action, Adversary};
use crate::invariants::{Checker, Violation};
use crate::latency::LatencyModel;
use crate::metrics::{Collector, MetricsReport, RunMeta};
use crate::scenario::{Scenario, ScenarioError, ScriptedOp};
use crate::scheduler::Scheduler;
use crate::workload::{self, Submission};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub check_invariants: bool,
    pub trace: bool,
    /// Keep every node event for inspection by tests.
    pub record_history: bool,
}

#[derive(Debug)]
enum Ev {
    Deliver { to: NodeId, from: NodeId, msg: Message },
    Timer { node: NodeId, timer: Timer },
    Submit(usize),
    Crash(NodeId),
    Recover(NodeId),
    Adversary { node: NodeId, action: Action },
    Flood(NodeId),
}

impl Ev {
    fn kind(&self) -> String {
        match self {
            Ev::Deliver { msg, .. } => format!("deliver:{}", msg.kind()),
            Ev::Timer { timer, .. } => format!("timer:{timer:?}").split('(').next().unwrap_or("timer").to_owned(),
            Ev::Submit(_) => "submit".into(),
            Ev::Crash(_) => "crash".into(),
            Ev::Recover(_) => "recover".into(),
            Ev::Adversary { .. } => "adversary".into(),
            Ev::Flood(_) => "flood".into(),
        }
    }
}

enum Slot {
    Correct(Box<Node>),
    Byzantine(Box<Adversary>),
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub violations: Vec<Violation>,
    /// Final state of every correct node, by id.
    pub nodes: BTreeMap<NodeId, Node>,
    pub history: Vec<(SimTime, NodeId, NodeEvent)>,
    pub trace: Vec<String>,
    pub decisions: BTreeMap<endorsedb_core::ProposalId, BTreeMap<NodeId, u8>>,
    /// True when the event queue drained before the horizon.
    pub quiescent: bool,
    pub end: SimTime,
    pub submissions: Vec<Submission>,
}

impl RunOutput {
    pub fn correct(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }
}

fn stream(seed: u64, label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

struct Sim<'a> {
    scenario: &'a Scenario,
    opts: RunOptions,
    now: SimTime,
    queue: Scheduler<Ev>,
    slots: Vec<Slot>,
    skew: Vec<SimDuration>,
    down: Vec<bool>,
    held: Vec<Vec<Ev>>,
    latency: LatencyModel,
    net_rng: ChaCha8Rng,
    submissions: Vec<Submission>,
    flood_until: SimTime,
    collector: Collector,
    checker: Checker,
    history: Vec<(SimTime, NodeId, NodeEvent)>,
    trace: Vec<String>,
}

pub fn run(scenario: &Scenario, seed: u64, opts: RunOptions) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let system = scenario.system()?;
    let total = scenario.total_nodes();
    let adversaries = scenario.adversary_nodes();

    let mut skew_rng = stream(seed, 1);
    let [lo, hi] = scenario.skew_range_ms;
    let mut skew: Vec<SimDuration> =
        (0..total).map(|_| SimDuration(skew_rng.random_range(lo * 1_000..=hi * 1_000))).collect();
    for o in &scenario.skew {
        skew[o.node as usize] = SimDuration::from_millis(o.ms);
    }
    let tau_hat = SimDuration::from_millis(scenario.tau_hat_ms);
    // Clocks may disagree by the full width of the skew range.
    let sync = SynchronyEstimator::uniform(total, tau_hat, SimDuration::from_millis(hi - lo));

    let deadline_offset = SimDuration::from_millis(scenario.workload.as_ref().map_or(5_000, |w| w.deadline_offset_ms));
    let everyone: Vec<NodeId> = (0..total).map(NodeId).collect();
    let slots = everyone
        .iter()
        .map(|id| {
            if let Some(spec) = scenario.adversary.iter().find(|a| a.node == id.0) {
                let adv = Adversary::new(
                    *id,
                    spec.behaviors.clone(),
                    everyone.clone(),
                    seed ^ (100 + id.0 as u64),
                    deadline_offset,
                );
                return Slot::Byzantine(Box::new(adv));
            }
            let mut cfg = NodeConfig::new(*id);
            cfg.speculative = scenario.speculative;
            cfg.clock_skew = skew[id.0 as usize];
            cfg.recovery_quorum = scenario.recovery_quorum();
            if let Some(p) = scenario.policy.iter().rev().find(|p| p.node == id.0) {
                cfg.policy = p.rule.to_policy();
            }
            Slot::Correct(Box::new(Node::new(system.clone(), cfg, sync.clone())))
        })
        .collect();

    let gateways: Vec<NodeId> = (0..scenario.n).map(NodeId).filter(|n| !adversaries.contains(n)).collect();
    let mut submissions = match &scenario.workload {
        Some(w) => workload::generate(w, &gateways, &mut stream(seed, 3)),
        None => vec![],
    };
    for s in &scenario.script {
        let ops = s
            .ops
            .iter()
            .map(|op| match op {
                ScriptedOp::Put { key, value } => Operation::Put { key: key.clone(), value: value.as_bytes().to_vec() },
                ScriptedOp::Increment { key, delta } => Operation::Increment { key: key.clone(), delta: *delta },
                ScriptedOp::Delete { key } => Operation::Delete { key: key.clone() },
            })
            .collect();
        let at = SimTime::from_millis(s.at_ms);
        let tx = Transaction {
            id: TxId::from_u128(s.id as u128),
            deadline: SimTime::from_millis(s.deadline_ms),
            preconditions: vec![],
            ops,
            submitter: NodeId(s.via),
            submit_time: at,
        };
        submissions.push(Submission { at, via: NodeId(s.via), tx, hotspot: false });
    }
    submissions.sort_by_key(|s| s.at);

    let correct: BTreeSet<NodeId> = everyone.iter().copied().filter(|n| !adversaries.contains(n)).collect();
    let mut sim = Sim {
        scenario,
        opts,
        now: SimTime::ZERO,
        queue: Scheduler::default(),
        slots,
        skew,
        down: vec![false; total as usize],
        held: (0..total).map(|_| Vec::new()).collect(),
        latency: LatencyModel::new(
            SimDuration((scenario.mean_link_latency_ms * 1_000.0).round() as i64),
            SimTime::from_millis(scenario.gst_ms),
            tau_hat,
            scenario.multi_hop,
        ),
        net_rng: stream(seed, 2),
        flood_until: submissions.last().map_or(SimTime::ZERO, |s| s.at),
        submissions,
        collector: Collector::new(correct),
        checker: Checker::default(),
        history: Vec::new(),
        trace: Vec::new(),
    };
    sim.seed_events();
    let quiescent = sim.run_loop();
    Ok(sim.finish(seed, quiescent))
}

impl Sim<'_> {
    fn local(&self, node: NodeId) -> SimTime {
        self.now + self.skew[node.0 as usize]
    }

    fn seed_events(&mut self) {
        for c in &self.scenario.crash {
            self.queue.push(SimTime::from_millis(c.at_ms), Ev::Crash(NodeId(c.node)));
            self.queue.push(SimTime::from_millis(c.at_ms + c.down_ms), Ev::Recover(NodeId(c.node)));
        }
        for i in 0..self.submissions.len() {
            self.queue.push(self.submissions[i].at, Ev::Submit(i));
        }
        if !self.submissions.is_empty() {
            let start = self.submissions[0].at;
            for slot in &self.slots {
                if let Slot::Byzantine(a) = slot {
                    if a.flood_rate().is_some() && !a.is_silent() {
                        self.queue.push(start, Ev::Flood(a.id));
                    }
                }
            }
        }
    }

    fn run_loop(&mut self) -> bool {
        let horizon = SimTime::from_millis(self.scenario.horizon_ms);
        while let Some(at) = self.queue.peek_time() {
            if at > horizon {
                return false;
            }
            let (at, ev) = self.queue.pop().expect("peeked");
            self.now = at;
            if self.opts.trace {
                let digest = Sha256::digest(format!("{ev:?}").as_bytes());
                let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
                self.trace.push(format!("{} {} {}", at.as_micros(), ev.kind(), hex));
            }
            self.step(ev);
        }
        true
    }

    fn step(&mut self, ev: Ev) {
        match ev {
            Ev::Deliver { to, .. } | Ev::Timer { node: to, .. } if self.down[to.0 as usize] => {
                self.held[to.0 as usize].push(ev);
            }
            Ev::Deliver { to, from, msg } => match &mut self.slots[to.0 as usize] {
                Slot::Correct(node) => {
                    let local = self.now + self.skew[to.0 as usize];
                    let out = node.on_message(local, from, msg);
                    self.after_step(to, out);
                }
                Slot::Byzantine(adv) => {
                    let local = self.now + self.skew[to.0 as usize];
                    let actions = adv.on_message(local, from, &msg);
                    for (delay, action) in actions {
                        self.queue.push(self.now + delay, Ev::Adversary { node: to, action });
                    }
                }
            },
            Ev::Timer { node, timer } => {
                let local = self.local(node);
                if let Slot::Correct(n) = &mut self.slots[node.0 as usize] {
                    let out = n.on_timer(local, timer);
                    self.after_step(node, out);
                }
            }
            Ev::Submit(i) => {
                let s = &self.submissions[i];
                let (via, tx, at, hotspot) = (s.via, s.tx.clone(), s.at, s.hotspot);
                self.collector.submitted(tx.id, at, hotspot);
                self.broadcast(via, Message::Transaction(tx));
            }
            Ev::Crash(node) => self.down[node.0 as usize] = true,
            Ev::Recover(node) => {
                self.down[node.0 as usize] = false;
                let local = self.local(node);
                if let Slot::Correct(n) = &mut self.slots[node.0 as usize] {
                    let out = n.on_recover(local);
                    self.after_step(node, out);
                }
                for held in std::mem::take(&mut self.held[node.0 as usize]) {
                    self.queue.push(self.now, held);
                }
            }
            Ev::Adversary { node, action } => match action {
                Action::Broadcast(m) => self.broadcast(node, m),
                Action::Send(to, m) => {
                    let d = self.latency.sample(&mut self.net_rng, self.now);
                    self.queue.push(self.now + d, Ev::Deliver { to, from: node, msg: m });
                }
                Action::PerRecipient(split) => self.equivocate(node, split),
            },
            Ev::Flood(node) => {
                let local = self.local(node);
                let Slot::Byzantine(adv) = &mut self.slots[node.0 as usize] else { return };
                let (actions, gap) = adv.flood_tick(local);
                for (delay, action) in actions {
                    self.queue.push(self.now + delay, Ev::Adversary { node, action });
                }
                if self.now + gap <= self.flood_until {
                    self.queue.push(self.now + gap, Ev::Flood(node));
                }
            }
        }
    }

    fn broadcast(&mut self, from: NodeId, msg: Message) {
        let delays = self.latency.broadcast(&mut self.net_rng, self.now, self.slots.len());
        for (to, d) in delays.into_iter().enumerate() {
            self.queue.push(self.now + d, Ev::Deliver { to: NodeId(to as u32), from, msg: msg.clone() });
        }
    }

    /// Per-recipient payloads. Correct nodes all end up with whichever payload
    /// reached a correct node first, as a reliable broadcast layer would enforce.
    fn equivocate(&mut self, from: NodeId, split: Vec<(NodeId, Message)>) {
        let delays = self.latency.broadcast(&mut self.net_rng, self.now, self.slots.len());
        let payload: BTreeMap<NodeId, Message> = split.into_iter().collect();
        let winner = (0..self.slots.len())
            .filter(|i| matches!(self.slots[*i], Slot::Correct(_)))
            .filter(|i| payload.contains_key(&NodeId(*i as u32)))
            .min_by_key(|i| (delays[*i], *i))
            .map(|i| payload[&NodeId(i as u32)].clone());
        for (to, d) in delays.into_iter().enumerate() {
            let id = NodeId(to as u32);
            let msg = match (&self.slots[to], &winner) {
                (Slot::Correct(_), Some(w)) => w.clone(),
                _ => match payload.get(&id) {
                    Some(m) => m.clone(),
                    None => continue,
                },
            };
            self.queue.push(self.now + d, Ev::Deliver { to: id, from, msg });
        }
    }

    fn after_step(&mut self, id: NodeId, out: Outbox) {
        let skew = self.skew[id.0 as usize];
        let local = self.now + skew;
        let Slot::Correct(node) = &mut self.slots[id.0 as usize] else { unreachable!("correct node") };
        let events = node.drain_events();
        for ev in &events {
            self.collector.observe(self.now, id, ev);
        }
        if self.opts.check_invariants {
            let Slot::Correct(node) = &self.slots[id.0 as usize] else { unreachable!() };
            for ev in &events {
                self.checker.observe(self.now, local, node, ev);
            }
        }
        if self.opts.record_history {
            self.history.extend(events.into_iter().map(|e| (self.now, id, e)));
        }
        for m in out.broadcasts {
            self.broadcast(id, m);
        }
        for (to, m) in out.sends {
            let d = self.latency.sample(&mut self.net_rng, self.now);
            self.queue.push(self.now + d, Ev::Deliver { to, from: id, msg: m });
        }
        for (at_local, timer) in out.timers {
            let at = (at_local - skew).max(self.now);
            self.queue.push(at, Ev::Timer { node: id, timer });
        }
    }

    fn finish(mut self, seed: u64, quiescent: bool) -> RunOutput {
        let tau_hat = SimDuration::from_millis(self.scenario.tau_hat_ms);
        let mut nodes = BTreeMap::new();
        for (i, slot) in std::mem::take(&mut self.slots).into_iter().enumerate() {
            if let Slot::Correct(n) = slot {
                nodes.insert(NodeId(i as u32), *n);
            }
        }
        if self.opts.check_invariants {
            let refs: Vec<&Node> = nodes.values().collect();
            let (now, skew) = (self.now, self.skew.clone());
            self.checker.finish(now, tau_hat, |n| now + skew[n.0 as usize], &refs);
        }
        let s = self.scenario;
        let meta = RunMeta {
            scenario: s.name.clone(),
            seed,
            n: s.n,
            f: s.f,
            omega: s.omega(),
            clients: s.workload.as_ref().map_or(0, |w| w.clients),
            hotspot_probability: s.workload.as_ref().map_or(0.0, |w| w.hotspot_probability),
            speculative: s.speculative,
        };
        let violations = std::mem::take(&mut self.checker.violations);
        RunOutput {
            report: self.collector.report(meta, violations.len()),
            decisions: self.checker.decisions().clone(),
            violations,
            nodes,
            history: self.history,
            trace: self.trace,
            quiescent,
            end: self.now,
            submissions: self.submissions,
        }
    }
}
