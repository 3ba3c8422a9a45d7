//! Scenario files: cluster shape, timing model, adversaries, crashes and workload.

use std::collections::BTreeSet;
use std::path::Path;

use endorsedb_core::{min_quorum, EndorsementPolicy, NodeId, SimDuration, SystemConfig};
use serde::{Deserialize, Serialize};

use crate::adversary::Behavior;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Config(#[from] endorsedb_core::ConfigError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: u32,
    pub f: u32,
    /// Defaults to `2n/3 + 1`.
    pub omega: Option<u32>,
    /// Nodes beyond `n` that replicate without endorsing.
    #[serde(default)]
    pub observers: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_latency")]
    pub mean_link_latency_ms: f64,
    #[serde(default)]
    pub multi_hop: bool,
    #[serde(default)]
    pub gst_ms: i64,
    #[serde(default = "default_skew")]
    pub skew_range_ms: [i64; 2],
    #[serde(default = "default_tau_hat")]
    pub tau_hat_ms: i64,
    #[serde(default = "default_old_delay")]
    pub old_delay_ms: i64,
    #[serde(default = "default_pool_window")]
    pub pool_window_ms: i64,
    #[serde(default = "default_true")]
    pub speculative: bool,
    #[serde(default = "default_horizon")]
    pub horizon_ms: i64,
    /// Identical snapshots needed to adopt state after recovery; defaults to `f + 1`.
    pub recovery_quorum: Option<u32>,
    #[serde(default)]
    pub adversary: Vec<AdversarySpec>,
    #[serde(default)]
    pub workload: Option<WorkloadConfig>,
    #[serde(default)]
    pub crash: Vec<CrashSpec>,
    #[serde(default)]
    pub skew: Vec<SkewOverride>,
    #[serde(default)]
    pub policy: Vec<PolicySpec>,
    #[serde(default)]
    pub script: Vec<ScriptedTx>,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_latency() -> f64 {
    20.0
}
fn default_skew() -> [i64; 2] {
    [-5_000, 5_000]
}
fn default_tau_hat() -> i64 {
    10_000
}
fn default_old_delay() -> i64 {
    2_000
}
fn default_pool_window() -> i64 {
    500
}
fn default_true() -> bool {
    true
}
fn default_horizon() -> i64 {
    3_600_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub node: u32,
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub clients: u32,
    pub rate_per_client: f64,
    #[serde(default = "default_keyspace")]
    pub keyspace_size: u32,
    #[serde(default)]
    pub hotspot_probability: f64,
    #[serde(default = "default_hotspot_keys")]
    pub hotspot_keys: u32,
    pub total_transactions: u32,
    #[serde(default = "default_deadline_offset")]
    pub deadline_offset_ms: i64,
    #[serde(default)]
    pub start_ms: i64,
    /// Optional cut-off for arrivals, relative to `start_ms`.
    pub duration_ms: Option<i64>,
}

fn default_keyspace() -> u32 {
    100
}
fn default_hotspot_keys() -> u32 {
    1
}
fn default_deadline_offset() -> i64 {
    5_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub node: u32,
    pub at_ms: i64,
    pub down_ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewOverride {
    pub node: u32,
    pub ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub node: u32,
    #[serde(flatten)]
    pub rule: PolicyRule,
}

/// Text-friendly form of [`EndorsementPolicy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyRule {
    ApproveAll,
    RejectAll,
    DenyKeys { keys: Vec<String> },
    DenyValues { values: Vec<String> },
    Random { approve: f64, seed: u64 },
}

impl PolicyRule {
    pub fn to_policy(&self) -> EndorsementPolicy {
        match self {
            PolicyRule::ApproveAll => EndorsementPolicy::ApproveAll,
            PolicyRule::RejectAll => EndorsementPolicy::RejectAll,
            PolicyRule::DenyKeys { keys } => EndorsementPolicy::DenyKeys { keys: keys.iter().cloned().collect() },
            PolicyRule::DenyValues { values } => {
                EndorsementPolicy::DenyValues { values: values.iter().map(|v| v.as_bytes().to_vec()).collect() }
            }
            PolicyRule::Random { approve, seed } => EndorsementPolicy::Random { approve: *approve, seed: *seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTx {
    /// Transaction id; also used as its label in reports.
    pub id: u64,
    pub via: u32,
    pub at_ms: i64,
    pub deadline_ms: i64,
    pub ops: Vec<ScriptedOp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptedOp {
    Put { key: String, value: String },
    Increment { key: String, delta: i64 },
    Delete { key: String },
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn omega(&self) -> u32 {
        self.omega.unwrap_or(2 * self.n / 3 + 1)
    }

    pub fn total_nodes(&self) -> u32 {
        self.n + self.observers
    }

    pub fn recovery_quorum(&self) -> u32 {
        self.recovery_quorum.unwrap_or(self.f + 1)
    }

    pub fn adversary_nodes(&self) -> BTreeSet<NodeId> {
        self.adversary.iter().map(|a| NodeId(a.node)).collect()
    }

    pub fn system(&self) -> Result<SystemConfig, ScenarioError> {
        let mut sys = SystemConfig::new(self.n, self.f, self.omega())?;
        sys.old_delay = SimDuration::from_millis(self.old_delay_ms);
        sys.checkpoint_pool_window = SimDuration::from_millis(self.pool_window_ms);
        sys.speculative_default = self.speculative;
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        min_quorum(self.n, self.f)?;
        self.system()?;
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let nodes = self.total_nodes();
        let adv = self.adversary_nodes();
        if adv.len() != self.adversary.len() {
            return bad("adversary node listed twice".into());
        }
        if adv.len() as u32 > self.f {
            return bad(format!("{} adversaries exceed f = {}", adv.len(), self.f));
        }
        if adv.iter().any(|a| a.0 >= self.n) {
            return bad("adversaries must be endorsers".into());
        }
        if self.mean_link_latency_ms <= 0.0 || self.tau_hat_ms <= 0 {
            return bad("latencies must be positive".into());
        }
        if self.skew_range_ms[0] > self.skew_range_ms[1] {
            return bad("skew range is inverted".into());
        }
        let node_refs = self
            .crash
            .iter()
            .map(|c| c.node)
            .chain(self.skew.iter().map(|s| s.node))
            .chain(self.policy.iter().map(|p| p.node))
            .chain(self.script.iter().map(|s| s.via));
        for n in node_refs {
            if n >= nodes {
                return bad(format!("node {n} out of range"));
            }
        }
        if self.crash.iter().any(|c| adv.contains(&NodeId(c.node)) || c.down_ms <= 0) {
            return bad("crashes apply to correct nodes for a positive duration".into());
        }
        if let Some(w) = &self.workload {
            if w.clients == 0 || w.rate_per_client <= 0.0 {
                return bad("workload rates must be positive".into());
            }
            if !(0.0..=1.0).contains(&w.hotspot_probability) {
                return bad("hotspot probability outside [0, 1]".into());
            }
            if w.keyspace_size < w.hotspot_keys || w.hotspot_keys == 0 {
                return bad("keyspace must hold at least one hotspot key".into());
            }
            if w.hotspot_keys == w.keyspace_size && w.hotspot_probability < 1.0 {
                return bad("no cold keys left for non-hotspot transactions".into());
            }
            if self.n - adv.len() as u32 == 0 {
                return bad("workload needs a correct node to submit through".into());
            }
        }
        Ok(())
    }

    /// Applies one `param=value` override used by sweeps.
    pub fn set_param(&mut self, param: &str, value: &str) -> Result<(), ScenarioError> {
        let invalid = |what: &str| ScenarioError::Invalid(format!("bad value {value:?} for {what}"));
        match param {
            "n" => {
                let n: u32 = value.parse().map_err(|_| invalid("n"))?;
                self.n = n;
                self.f = (n - 1) / 3;
                self.omega = None;
                self.adversary.retain(|a| a.node < n);
                while self.adversary.len() as u32 > self.f {
                    self.adversary.pop();
                }
            }
            "clients" => {
                let w = self.workload.as_mut().ok_or_else(|| invalid("clients"))?;
                w.clients = value.parse().map_err(|_| invalid("clients"))?;
            }
            "hotspot" => {
                let w = self.workload.as_mut().ok_or_else(|| invalid("hotspot"))?;
                w.hotspot_probability = value.parse().map_err(|_| invalid("hotspot"))?;
            }
            "speculative" => self.speculative = value.parse().map_err(|_| invalid("speculative"))?,
            other => return Err(ScenarioError::Invalid(format!("unknown sweep parameter {other:?}"))),
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "n = 4\nf = 1\n";

    #[test]
    fn defaults() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.omega(), 3);
        assert_eq!(s.recovery_quorum(), 2);
        assert_eq!(s.skew_range_ms, [-5_000, 5_000]);
        assert_eq!(s.tau_hat_ms, 10_000);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Scenario::parse("n = 3\nf = 1\n").is_err());
        assert!(Scenario::parse("n = 4\nf = 1\nomega = 2\n").is_err());
        let too_many = "n = 4\nf = 1\n[[adversary]]\nnode = 1\n[[adversary]]\nnode = 2\n";
        assert!(Scenario::parse(too_many).is_err());
        assert!(Scenario::parse("n = 4\nf = 1\nbogus = 1\n").is_err());
    }

    #[test]
    fn parses_full_file() {
        let text = r#"
name = "demo"
n = 4
f = 1
seeds = [3, 4]
[[adversary]]
node = 3
behaviors = [{ kind = "delay_endorsements", delay_ms = 300 }, { kind = "equivocate" }]
[workload]
clients = 2
rate_per_client = 1.5
total_transactions = 10
hotspot_probability = 0.1
[[crash]]
node = 1
at_ms = 10
down_ms = 100
[[policy]]
node = 2
kind = "deny_values"
values = ["q"]
[[script]]
id = 7
via = 0
at_ms = 0
deadline_ms = 2000
ops = [{ kind = "put", key = "x", value = "q" }]
"#;
        let s = Scenario::parse(text).unwrap();
        assert_eq!(s.adversary[0].behaviors.len(), 2);
        assert_eq!(s.policy[0].rule, PolicyRule::DenyValues { values: vec!["q".into()] });
        assert_eq!(s.script[0].ops.len(), 1);
    }

    #[test]
    fn sweep_overrides() {
        let mut s =
            Scenario::parse("n = 10\nf = 3\n[workload]\nclients = 1\nrate_per_client = 1.0\ntotal_transactions = 1\n")
                .unwrap();
        s.set_param("n", "20").unwrap();
        assert_eq!((s.n, s.f, s.omega()), (20, 6, 14));
        s.set_param("hotspot", "0.05").unwrap();
        assert_eq!(s.workload.as_ref().unwrap().hotspot_probability, 0.05);
        assert!(s.set_param("color", "red").is_err());
    }
}
