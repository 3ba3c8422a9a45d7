//! Versioned key-value state with speculative apply, rollback and commit.
//!
//! Puts and deletes resolve by the transaction total order `(deadline, id)`
//! and increments accumulate on top of the newest put, so the materialized
//! state depends only on the *set* of applied transactions, never on the order
//! they arrived in. Two nodes that committed the same set hold the same state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{SnapshotError, StoreError};
use crate::model::{Operation, Transaction, TxId};
use crate::time::SimTime;

/// Position of one operation in the global transaction order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stamp {
    pub deadline: SimTime,
    pub tx: TxId,
    pub op_index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Value {
    Bytes(Vec<u8>),
    Int(i64),
}

/// Materialized view of one key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Entry {
    pub value: Option<Value>,
    pub version: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct KeyState {
    register: Option<Value>,
    register_stamp: Option<Stamp>,
    increments: BTreeMap<Stamp, i64>,
    version: u64,
}

impl KeyState {
    fn apply(&mut self, op: &Operation, stamp: Stamp) {
        self.version += 1;
        match op {
            Operation::Put { value, .. } => self.overwrite(Some(Value::Bytes(value.clone())), stamp),
            Operation::Delete { .. } => self.overwrite(None, stamp),
            Operation::Increment { delta, .. } => {
                if self.register_stamp.is_none_or(|s| stamp > s) {
                    self.increments.insert(stamp, *delta);
                }
            }
        }
    }

    fn overwrite(&mut self, value: Option<Value>, stamp: Stamp) {
        if self.register_stamp.is_some_and(|s| s > stamp) {
            return;
        }
        self.register = value;
        self.register_stamp = Some(stamp);
        self.increments = self.increments.split_off(&stamp);
    }

    fn materialize(&self) -> Entry {
        let value = if self.increments.is_empty() {
            self.register.clone()
        } else {
            let base = match self.register {
                Some(Value::Int(i)) => i,
                _ => 0,
            };
            Some(Value::Int(self.increments.values().fold(base, |acc, d| acc.wrapping_add(*d))))
        };
        Entry { value, version: self.version }
    }
}

fn apply_ops(map: &mut BTreeMap<String, KeyState>, t: &Transaction) {
    for (i, op) in t.ops.iter().enumerate() {
        let stamp = Stamp { deadline: t.deadline, tx: t.id, op_index: i as u32 };
        map.entry(op.key().to_owned()).or_default().apply(op, stamp);
    }
}

/// Per-node datastore: committed base plus speculatively applied transactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatastoreState {
    base: BTreeMap<String, KeyState>,
    current: BTreeMap<String, KeyState>,
    speculative: Vec<Transaction>,
    committed: BTreeSet<TxId>,
}

impl DatastoreState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current (speculative included) view of `key`; absent keys have version 0.
    pub fn get(&self, key: &str) -> Entry {
        self.current.get(key).map(KeyState::materialize).unwrap_or_default()
    }

    /// Committed-only view of `key`.
    pub fn get_committed(&self, key: &str) -> Entry {
        self.base.get(key).map(KeyState::materialize).unwrap_or_default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Entry)> {
        self.current.iter().map(|(k, s)| (k.as_str(), s.materialize()))
    }

    pub fn is_applied(&self, id: TxId) -> bool {
        self.speculative.iter().any(|t| t.id == id)
    }

    pub fn is_committed(&self, id: TxId) -> bool {
        self.committed.contains(&id)
    }

    pub fn committed(&self) -> &BTreeSet<TxId> {
        &self.committed
    }

    /// Applied but not yet committed, in application order.
    pub fn speculative(&self) -> impl Iterator<Item = &Transaction> {
        self.speculative.iter()
    }

    pub fn check_preconditions(&self, t: &Transaction) -> bool {
        t.preconditions.iter().all(|p| self.get(&p.key).version == p.expected_version)
    }

    /// Entries `t` would leave behind for the keys it touches, without mutating anything.
    pub fn preview(&self, t: &Transaction) -> BTreeMap<String, Entry> {
        let mut touched: BTreeMap<String, KeyState> = t
            .ops
            .iter()
            .map(|op| (op.key().to_owned(), self.current.get(op.key()).cloned().unwrap_or_default()))
            .collect();
        apply_ops(&mut touched, t);
        touched.into_iter().map(|(k, s)| (k, s.materialize())).collect()
    }

    pub fn apply(&mut self, t: &Transaction) -> Result<(), StoreError> {
        if self.committed.contains(&t.id) {
            return Err(StoreError::AlreadyCommitted(t.id));
        }
        if self.is_applied(t.id) {
            return Err(StoreError::AlreadyApplied(t.id));
        }
        apply_ops(&mut self.current, t);
        self.speculative.push(t.clone());
        Ok(())
    }

    /// Removes `t`'s effects, leaving exactly the state of the remaining applied set.
    pub fn rollback(&mut self, id: TxId) -> Result<(), StoreError> {
        if self.committed.contains(&id) {
            return Err(StoreError::AlreadyCommitted(id));
        }
        let pos = self.speculative.iter().position(|t| t.id == id).ok_or(StoreError::NotApplied(id))?;
        let removed = self.speculative.remove(pos);
        // Only keys touched by the rolled-back transaction need rebuilding.
        for op in &removed.ops {
            let key = op.key();
            let mut rebuilt = self.base.get(key).cloned().unwrap_or_default();
            for t in &self.speculative {
                for (i, later) in t.ops.iter().enumerate().filter(|(_, o)| o.key() == key) {
                    rebuilt.apply(later, Stamp { deadline: t.deadline, tx: t.id, op_index: i as u32 });
                }
            }
            if rebuilt == KeyState::default() {
                self.current.remove(key);
            } else {
                self.current.insert(key.to_owned(), rebuilt);
            }
        }
        Ok(())
    }

    pub fn commit(&mut self, id: TxId) -> Result<(), StoreError> {
        if self.committed.contains(&id) {
            return Err(StoreError::AlreadyCommitted(id));
        }
        let pos = self.speculative.iter().position(|t| t.id == id).ok_or(StoreError::NotApplied(id))?;
        let t = self.speculative.remove(pos);
        apply_ops(&mut self.base, &t);
        self.committed.insert(id);
        Ok(())
    }

    /// Apply-if-needed followed by commit.
    pub fn apply_and_commit(&mut self, t: &Transaction) -> Result<(), StoreError> {
        if !self.is_applied(t.id) {
            self.apply(t)?;
        }
        self.commit(t.id)
    }

    /// Discards every speculative application, returning the ids that were rolled back.
    pub fn discard_speculative(&mut self) -> Vec<TxId> {
        let ids = self.speculative.drain(..).map(|t| t.id).collect();
        self.current = self.base.clone();
        ids
    }

    /// Canonical encoding of the committed state.
    ///
    /// Layout (all integers big-endian):
    /// `u32 entry_count`, then per key in ascending byte order
    /// `u32 key_len, key, u32 value_len, value, u64 version`,
    /// then `u32 tx_count` and the sorted committed ids (16 bytes each).
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.base.len() as u32).to_be_bytes());
        for (key, state) in &self.base {
            out.extend_from_slice(&(key.len() as u32).to_be_bytes());
            out.extend_from_slice(key.as_bytes());
            let value = encode_value(state);
            out.extend_from_slice(&(value.len() as u32).to_be_bytes());
            out.extend_from_slice(&value);
            out.extend_from_slice(&state.version.to_be_bytes());
        }
        out.extend_from_slice(&(self.committed.len() as u32).to_be_bytes());
        for id in &self.committed {
            out.extend_from_slice(&id.0);
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let mut base = BTreeMap::new();
        let mut last_key: Option<String> = None;
        for _ in 0..r.u32()? {
            let klen = r.u32()? as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec()).map_err(|_| SnapshotError::BadKey)?;
            if last_key.as_ref().is_some_and(|k| k.as_bytes() >= key.as_bytes()) {
                return Err(SnapshotError::Unsorted);
            }
            let vlen = r.u32()? as usize;
            let start = r.pos;
            let mut state = decode_value(&mut r)?;
            if r.pos - start != vlen {
                return Err(SnapshotError::Truncated(r.pos));
            }
            state.version = r.u64()?;
            last_key = Some(key.clone());
            base.insert(key, state);
        }
        let mut committed = BTreeSet::new();
        let mut last: Option<TxId> = None;
        for _ in 0..r.u32()? {
            let id = TxId(r.take(16)?.try_into().expect("16 bytes"));
            if last.is_some_and(|l| l >= id) {
                return Err(SnapshotError::Unsorted);
            }
            last = Some(id);
            committed.insert(id);
        }
        if r.pos != bytes.len() {
            return Err(SnapshotError::Trailing(bytes.len() - r.pos));
        }
        Ok(DatastoreState { current: base.clone(), base, speculative: Vec::new(), committed })
    }
}

// value := register_tag u8 (0 absent, 1 bytes, 2 int) [u32 len + bytes | i64]
//          has_stamp u8 [stamp]
//          u32 increment_count (stamp i64)*
// stamp := i64 deadline, 16-byte tx id, u32 op index
fn encode_value(s: &KeyState) -> Vec<u8> {
    let mut out = Vec::new();
    match &s.register {
        None => out.push(0),
        Some(Value::Bytes(b)) => {
            out.push(1);
            out.extend_from_slice(&(b.len() as u32).to_be_bytes());
            out.extend_from_slice(b);
        }
        Some(Value::Int(i)) => {
            out.push(2);
            out.extend_from_slice(&i.to_be_bytes());
        }
    }
    match s.register_stamp {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            encode_stamp(&mut out, st);
        }
    }
    out.extend_from_slice(&(s.increments.len() as u32).to_be_bytes());
    for (st, d) in &s.increments {
        encode_stamp(&mut out, *st);
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

fn encode_stamp(out: &mut Vec<u8>, st: Stamp) {
    out.extend_from_slice(&st.deadline.0.to_be_bytes());
    out.extend_from_slice(&st.tx.0);
    out.extend_from_slice(&st.op_index.to_be_bytes());
}

fn decode_value(r: &mut Reader<'_>) -> Result<KeyState, SnapshotError> {
    let register = match r.u8()? {
        0 => None,
        1 => {
            let len = r.u32()? as usize;
            Some(Value::Bytes(r.take(len)?.to_vec()))
        }
        2 => Some(Value::Int(r.u64()? as i64)),
        tag => return Err(SnapshotError::BadTag(tag)),
    };
    let register_stamp = match r.u8()? {
        0 => None,
        1 => Some(decode_stamp(r)?),
        tag => return Err(SnapshotError::BadTag(tag)),
    };
    let mut increments = BTreeMap::new();
    for _ in 0..r.u32()? {
        let st = decode_stamp(r)?;
        increments.insert(st, r.u64()? as i64);
    }
    Ok(KeyState { register, register_stamp, increments, version: 0 })
}

fn decode_stamp(r: &mut Reader<'_>) -> Result<Stamp, SnapshotError> {
    let deadline = SimTime(r.u64()? as i64);
    let tx = TxId(r.take(16)?.try_into().expect("16 bytes"));
    Ok(Stamp { deadline, tx, op_index: r.u32()? })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(SnapshotError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
