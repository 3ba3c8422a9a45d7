//! Local endorsement policies. A node silently withholds its endorsement from
//! any transaction its policy rejects.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Transaction;
use crate::store::{Entry, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndorsementPolicy {
    #[default]
    ApproveAll,
    /// Never endorses; the node still tracks state as an observer.
    RejectAll,
    /// Rejects any transaction touching one of these keys.
    DenyKeys { keys: BTreeSet<String> },
    /// Rejects any transaction that would leave one of these byte values behind.
    DenyValues { values: BTreeSet<Vec<u8>> },
    /// Approves with probability `approve`, drawn from a stream keyed by (seed, tx id).
    Random { approve: f64, seed: u64 },
}

impl EndorsementPolicy {
    pub fn approves(&self, t: &Transaction, preview: &BTreeMap<String, Entry>) -> bool {
        match self {
            EndorsementPolicy::ApproveAll => true,
            EndorsementPolicy::RejectAll => false,
            EndorsementPolicy::DenyKeys { keys } => t.ops.iter().all(|op| !keys.contains(op.key())),
            EndorsementPolicy::DenyValues { values } => preview.values().all(|e| match &e.value {
                Some(Value::Bytes(b)) => !values.contains(b),
                _ => true,
            }),
            EndorsementPolicy::Random { approve, seed } => {
                let mut key = [0u8; 32];
                key[..8].copy_from_slice(&seed.to_be_bytes());
                key[8..24].copy_from_slice(&t.id.0);
                ChaCha8Rng::from_seed(key).random::<f64>() < *approve
            }
        }
    }
}
