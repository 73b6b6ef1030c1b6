// SPDX-License-Identifier: Apache-2.0

//! In-memory transactional key-value store driven in simulated time.
//!
//! Each operation runs under a per-operation [`CCAction`]: either it takes a
//! two-phase lock immediately, or it proceeds without locking and is checked
//! by backward validation at commit. Writes are buffered and installed at
//! commit, so every committed transaction serializes at its commit instant.

mod locks;
mod window;
mod workload;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::recovery::{Lsn, RecoveryError, RecoveryLog, RecoveryReport};

pub use locks::{LockMode, LockTable};
pub use window::{ActionPolicy, KeyHeat, WindowContext};
pub use workload::{WorkloadGenerator, WorkloadSpec};

/// Logical simulation time.
pub type Tick = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TxnId(pub u64);

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// SHA-256 over `(key, value, version)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Checksum(pub [u8; 32]);

impl fmt::Debug for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checksum({})", hex::encode(&self.0[..8]))
    }
}

impl Checksum {
    pub fn of(key: Key, value: i64, version: u64) -> Checksum {
        let mut h = Sha256::new();
        h.update(b"frp-record");
        h.update(key.0.to_le_bytes());
        h.update(value.to_le_bytes());
        h.update(version.to_le_bytes());
        Checksum(h.finalize().into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub key: Key,
    pub value: i64,
    pub version: u64,
    pub checksum: Checksum,
}

impl Record {
    pub const ENCODED_LEN: usize = 4 + 8 + 8 + 32;

    pub fn new(key: Key, value: i64, version: u64) -> Record {
        Record { key, value, version, checksum: Checksum::of(key, value, version) }
    }

    /// State of a key that has never been written.
    pub fn initial(key: Key) -> Record {
        Record::new(key, 0, 0)
    }

    pub fn checksum_matches(&self) -> bool {
        self.checksum == Checksum::of(self.key, self.value, self.version)
    }

    /// Storage image of the record, as held by the untrusted store.
    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[0..4].copy_from_slice(&self.key.0.to_le_bytes());
        out[4..12].copy_from_slice(&self.value.to_le_bytes());
        out[12..20].copy_from_slice(&self.version.to_le_bytes());
        out[20..].copy_from_slice(&self.checksum.0);
        out
    }

    pub fn decode(bytes: &[u8; Self::ENCODED_LEN]) -> Record {
        let key = Key(u32::from_le_bytes(bytes[0..4].try_into().unwrap()));
        let value = i64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let version = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let mut checksum = [0u8; 32];
        checksum.copy_from_slice(&bytes[20..]);
        Record { key, value, version, checksum: Checksum(checksum) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnOp {
    Read { key: Key },
    Write { key: Key, value: i64 },
}

impl TxnOp {
    pub fn key(&self) -> Key {
        match *self {
            TxnOp::Read { key } | TxnOp::Write { key, .. } => key,
        }
    }

    pub fn kind(&self) -> OpKind {
        match self {
            TxnOp::Read { .. } => OpKind::Read,
            TxnOp::Write { .. } => OpKind::Write,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CCAction {
    LockImmediate,
    OptimisticNoLock,
}

impl CCAction {
    pub fn flipped(self) -> CCAction {
        match self {
            CCAction::LockImmediate => CCAction::OptimisticNoLock,
            CCAction::OptimisticNoLock => CCAction::LockImmediate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    Committed,
    Aborted(AbortReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    /// Backward validation failed.
    Conflict,
    /// Chosen as the youngest member of a wait-for cycle.
    Deadlock,
    /// Still in flight when a simulation window closed.
    WindowEnd,
    /// Explicit abort requested by the caller.
    User,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpOutcome {
    Ok,
    /// Lock granted after blocking for the given number of ticks.
    Waited(Tick),
    /// Optimistic access that overlaps a concurrent writer; validation decides.
    ConflictNoted,
    /// Lock unavailable or key under repair; retry later.
    Blocked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed,
    Aborted(AbortReason),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("transaction {0} is not active")]
    NotActive(TxnId),
    #[error("transaction {0} has no pending operations")]
    NoPendingOps(TxnId),
    #[error("transaction {0} still has pending operations")]
    OpsPending(TxnId),
    #[error("transaction {0} aborted to break a deadlock")]
    Deadlock(TxnId),
    #[error("engine has {0} active transactions")]
    NotQuiescent(usize),
    #[error("recovery logging is disabled")]
    NoLog,
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}

/// Counters for one measurement window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    pub submitted_count: u64,
    pub committed_count: u64,
    pub aborted_count: u64,
    /// Ticks spent blocked on locks.
    pub total_lock_wait: u64,
    pub op_count: u64,
    pub locked_op_count: u64,
    /// Operations that touched a key another active transaction had accessed,
    /// with at least one side writing.
    pub conflict_op_count: u64,
}

impl ExecStats {
    pub fn merge(&mut self, other: &ExecStats) {
        self.submitted_count += other.submitted_count;
        self.committed_count += other.committed_count;
        self.aborted_count += other.aborted_count;
        self.total_lock_wait += other.total_lock_wait;
        self.op_count += other.op_count;
        self.locked_op_count += other.locked_op_count;
        self.conflict_op_count += other.conflict_op_count;
    }
}

#[derive(Clone, Debug)]
pub struct Txn {
    pub id: TxnId,
    pub ops: Vec<TxnOp>,
    pub mode_per_op: Vec<CCAction>,
    pub status: TxnStatus,
    /// Values returned by executed reads, in op order.
    pub reads: Vec<(Key, i64)>,
    blocked_since: Option<Tick>,
    /// Versions observed by optimistic accesses, checked at commit.
    observed: BTreeMap<Key, u64>,
    /// Keys written without a lock.
    optimistic_writes: BTreeSet<Key>,
    writes: BTreeMap<Key, i64>,
    locked: BTreeSet<Key>,
    accessed: BTreeMap<Key, bool>,
}

impl Txn {
    fn new(id: TxnId, ops: Vec<TxnOp>) -> Txn {
        Txn {
            id,
            ops,
            mode_per_op: Vec::new(),
            status: TxnStatus::Active,
            reads: Vec::new(),
            blocked_since: None,
            observed: BTreeMap::new(),
            optimistic_writes: BTreeSet::new(),
            writes: BTreeMap::new(),
            locked: BTreeSet::new(),
            accessed: BTreeMap::new(),
        }
    }

    pub fn next_op(&self) -> Option<&TxnOp> {
        self.ops.get(self.mode_per_op.len())
    }

    pub fn executed(&self) -> usize {
        self.mode_per_op.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Ticks to service one operation.
    pub op_ticks: Tick,
    /// Extra ticks a locked operation costs over an unlocked one.
    pub lock_overhead: Tick,
    /// Ticks to validate and install at commit.
    pub commit_ticks: Tick,
    /// Ticks an aborted transaction waits before restarting.
    pub restart_backoff: Tick,
    /// Write redo/anchor logs on commit.
    pub logging: bool,
    /// Modifications per key between anchor records.
    pub anchor_interval: u64,
    /// Seed for the enclave MAC key.
    pub enclave_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            op_ticks: 1,
            lock_overhead: 1,
            commit_ticks: 1,
            restart_backoff: 2,
            logging: false,
            anchor_interval: 4,
            enclave_seed: 0,
        }
    }
}

pub struct Engine {
    config: EngineConfig,
    store: BTreeMap<Key, Record>,
    locks: LockTable,
    txns: BTreeMap<TxnId, Txn>,
    /// Active transactions that accessed each key, with whether they wrote it.
    accessors: BTreeMap<Key, BTreeMap<TxnId, bool>>,
    quarantined: BTreeSet<Key>,
    log: Option<RecoveryLog>,
    next_txn: u64,
    now: Tick,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Engine {
        let log = config.logging.then(|| RecoveryLog::new(config.anchor_interval, config.enclave_seed));
        Engine {
            config,
            store: BTreeMap::new(),
            locks: LockTable::default(),
            txns: BTreeMap::new(),
            accessors: BTreeMap::new(),
            quarantined: BTreeSet::new(),
            log,
            next_txn: 1,
            now: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn advance(&mut self, ticks: Tick) {
        self.now += ticks;
    }

    pub fn begin(&mut self, ops: Vec<TxnOp>) -> TxnId {
        let id = TxnId(self.next_txn);
        self.next_txn += 1;
        self.txns.insert(id, Txn::new(id, ops));
        id
    }

    pub fn txn(&self, id: TxnId) -> Option<&Txn> {
        self.txns.get(&id)
    }

    pub fn status(&self, id: TxnId) -> Option<TxnStatus> {
        self.txns.get(&id).map(|t| t.status)
    }

    pub fn active_count(&self) -> usize {
        self.txns.values().filter(|t| t.status == TxnStatus::Active).count()
    }

    /// Drop bookkeeping for finished transactions.
    pub fn forget(&mut self, id: TxnId) {
        if let Some(t) = self.txns.get(&id) {
            if t.status != TxnStatus::Active {
                self.txns.remove(&id);
            }
        }
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    /// Committed state of `key` as seen by the store.
    pub fn get(&self, key: Key) -> Record {
        self.store.get(&key).copied().unwrap_or_else(|| Record::initial(key))
    }

    pub fn snapshot(&self) -> BTreeMap<Key, i64> {
        self.store.iter().map(|(k, r)| (*k, r.value)).collect()
    }

    pub fn log(&self) -> Option<&RecoveryLog> {
        self.log.as_ref()
    }

    pub fn log_mut(&mut self) -> Option<&mut RecoveryLog> {
        self.log.as_mut()
    }

    /// Raw access to the untrusted store, for tamper injection.
    pub fn store_mut(&mut self) -> &mut BTreeMap<Key, Record> {
        &mut self.store
    }

    pub fn is_quarantined(&self, key: Key) -> bool {
        self.quarantined.contains(&key)
    }

    /// Execute the transaction's next operation under `action`.
    pub fn execute_op(&mut self, id: TxnId, action: CCAction) -> Result<OpOutcome, EngineError> {
        let now = self.now;
        let txn = self.txns.get(&id).ok_or(EngineError::UnknownTxn(id))?;
        if txn.status != TxnStatus::Active {
            return Err(EngineError::NotActive(id));
        }
        let op = *txn.next_op().ok_or(EngineError::NoPendingOps(id))?;
        let key = op.key();
        if self.quarantined.contains(&key) {
            self.txns.get_mut(&id).unwrap().blocked_since.get_or_insert(now);
            return Ok(OpOutcome::Blocked);
        }

        let outcome = match action {
            CCAction::LockImmediate => {
                let mode = match op.kind() {
                    OpKind::Read => LockMode::Shared,
                    OpKind::Write => LockMode::Exclusive,
                };
                match self.locks.try_acquire(key, id, mode) {
                    Ok(()) => {
                        let txn = self.txns.get_mut(&id).unwrap();
                        txn.locked.insert(key);
                        match txn.blocked_since.take() {
                            Some(since) => OpOutcome::Waited(now - since),
                            None => OpOutcome::Ok,
                        }
                    }
                    Err(_) => {
                        self.txns.get_mut(&id).unwrap().blocked_since.get_or_insert(now);
                        if let Some(victim) = self.find_deadlock_victim(id) {
                            self.abort(victim, AbortReason::Deadlock)?;
                            if victim == id {
                                return Err(EngineError::Deadlock(id));
                            }
                            // The victim's locks are gone; try again at once.
                            return self.execute_op(id, action);
                        }
                        return Ok(OpOutcome::Blocked);
                    }
                }
            }
            CCAction::OptimisticNoLock => {
                let concurrent_writer = match op.kind() {
                    OpKind::Read => self.locks.exclusive_by_other(key, id),
                    OpKind::Write => self.locks.locked_by_other(key, id),
                } || self.other_accessor_wrote(key, id);
                let version = self.get(key).version;
                let txn = self.txns.get_mut(&id).unwrap();
                txn.blocked_since = None;
                if !txn.writes.contains_key(&key) {
                    txn.observed.entry(key).or_insert(version);
                }
                if op.kind() == OpKind::Write {
                    txn.optimistic_writes.insert(key);
                }
                if concurrent_writer {
                    OpOutcome::ConflictNoted
                } else {
                    OpOutcome::Ok
                }
            }
        };

        let committed_value = self.get(key).value;
        let txn = self.txns.get_mut(&id).unwrap();
        match op {
            TxnOp::Read { key } => {
                let v = txn.writes.get(&key).copied().unwrap_or(committed_value);
                txn.reads.push((key, v));
            }
            TxnOp::Write { key, value } => {
                txn.writes.insert(key, value);
            }
        }
        let wrote = op.kind() == OpKind::Write;
        let seen = txn.accessed.entry(key).or_insert(false);
        *seen |= wrote;
        let wrote = *seen;
        txn.mode_per_op.push(action);
        self.accessors.entry(key).or_default().insert(id, wrote);
        Ok(outcome)
    }

    /// Whether `op` on `key` by `id` overlaps another active transaction's
    /// access with at least one side writing.
    pub fn access_conflicts(&self, id: TxnId, op: &TxnOp) -> bool {
        let Some(others) = self.accessors.get(&op.key()) else {
            return false;
        };
        let writes = op.kind() == OpKind::Write;
        others.iter().any(|(&t, &w)| t != id && (w || writes))
    }

    fn other_accessor_wrote(&self, key: Key, id: TxnId) -> bool {
        self.accessors.get(&key).is_some_and(|m| m.iter().any(|(&t, &w)| t != id && w))
    }

    /// Youngest transaction on a wait-for cycle through `start`, if any.
    fn find_deadlock_victim(&self, start: TxnId) -> Option<TxnId> {
        // DFS over wait-for edges: a blocked txn waits for the holders that
        // are incompatible with its pending request.
        let mut stack = vec![(start, vec![start])];
        let mut visited = BTreeSet::new();
        while let Some((node, path)) = stack.pop() {
            for next in self.waits_for(node) {
                if next == start {
                    return path.iter().copied().max();
                }
                if visited.insert(next) {
                    let mut p = path.clone();
                    p.push(next);
                    stack.push((next, p));
                }
            }
        }
        None
    }

    fn waits_for(&self, id: TxnId) -> Vec<TxnId> {
        let Some(txn) = self.txns.get(&id) else {
            return Vec::new();
        };
        if txn.status != TxnStatus::Active || txn.blocked_since.is_none() {
            return Vec::new();
        }
        let Some(op) = txn.next_op() else {
            return Vec::new();
        };
        let mode = match op.kind() {
            OpKind::Read => LockMode::Shared,
            OpKind::Write => LockMode::Exclusive,
        };
        self.locks.blockers(op.key(), id, mode)
    }

    /// Backward validation, then atomic install of buffered writes.
    pub fn validate_and_commit(&mut self, id: TxnId) -> Result<CommitOutcome, EngineError> {
        let txn = self.txns.get(&id).ok_or(EngineError::UnknownTxn(id))?;
        if txn.status != TxnStatus::Active {
            return Err(EngineError::NotActive(id));
        }
        if txn.next_op().is_some() {
            return Err(EngineError::OpsPending(id));
        }
        let stale = txn.observed.iter().any(|(k, &v)| self.get(*k).version != v);
        let write_locked =
            txn.optimistic_writes.iter().any(|&k| !txn.locked.contains(&k) && self.locks.locked_by_other(k, id));
        if stale || write_locked {
            self.abort(id, AbortReason::Conflict)?;
            return Ok(CommitOutcome::Aborted(AbortReason::Conflict));
        }

        let writes: Vec<(Key, i64)> = txn.writes.iter().map(|(k, v)| (*k, *v)).collect();
        if let Some(log) = self.log.as_mut() {
            if !writes.is_empty() {
                log.open_txn(id)?;
            }
        }
        for (key, value) in &writes {
            let version = self.get(*key).version + 1;
            self.store.insert(*key, Record::new(*key, *value, version));
            if let Some(log) = self.log.as_mut() {
                log.append_redo(id, *key, *value)?;
            }
        }
        if let Some(log) = self.log.as_mut() {
            if !writes.is_empty() {
                log.seal_txn(id)?;
            }
        }
        self.finish(id, TxnStatus::Committed);
        Ok(CommitOutcome::Committed)
    }

    pub fn abort(&mut self, id: TxnId, reason: AbortReason) -> Result<(), EngineError> {
        let txn = self.txns.get(&id).ok_or(EngineError::UnknownTxn(id))?;
        if txn.status != TxnStatus::Active {
            return Err(EngineError::NotActive(id));
        }
        self.finish(id, TxnStatus::Aborted(reason));
        Ok(())
    }

    fn finish(&mut self, id: TxnId, status: TxnStatus) {
        let txn = self.txns.get_mut(&id).unwrap();
        txn.status = status;
        txn.blocked_since = None;
        let locked = std::mem::take(&mut txn.locked);
        let accessed: Vec<Key> = txn.accessed.keys().copied().collect();
        self.locks.release(id, &locked);
        for key in accessed {
            if let Some(m) = self.accessors.get_mut(&key) {
                m.remove(&id);
                if m.is_empty() {
                    self.accessors.remove(&key);
                }
            }
        }
    }

    /// Check a stored record against its checksum and the sealed log.
    pub fn detect_tamper(&self, key: Key) -> bool {
        let stored = self.get(key);
        match &self.log {
            Some(log) => log.detect_tamper(key, &stored),
            None => !stored.checksum_matches() || stored.key != key,
        }
    }

    /// Block the key, rebuild it from the log, reinstall it, unblock.
    pub fn repair(&mut self, key: Key) -> Result<RecoveryReport, EngineError> {
        self.quarantined.insert(key);
        let result =
            self.log.as_ref().ok_or(EngineError::NoLog).and_then(|log| log.recover(key).map_err(EngineError::from));
        if let Ok(report) = &result {
            self.store.insert(key, report.record);
            self.quarantined.remove(&key);
        }
        result
    }

    /// Installed-write log sequence number high-water mark.
    pub fn last_lsn(&self) -> Option<Lsn> {
        self.log.as_ref().and_then(|l| l.last_lsn())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Engine {
        Engine::new(EngineConfig::default())
    }

    fn w(k: u32, v: i64) -> TxnOp {
        TxnOp::Write { key: Key(k), value: v }
    }

    fn r(k: u32) -> TxnOp {
        TxnOp::Read { key: Key(k) }
    }

    #[test]
    fn uncontended_lock_is_immediate() {
        let mut e = engine();
        let t = e.begin(vec![w(1, 5)]);
        assert_eq!(e.execute_op(t, CCAction::LockImmediate), Ok(OpOutcome::Ok));
        assert_eq!(e.validate_and_commit(t), Ok(CommitOutcome::Committed));
        assert_eq!(e.get(Key(1)).value, 5);
        assert_eq!(e.get(Key(1)).version, 1);
        assert!(e.locks().is_empty());
    }

    #[test]
    fn contended_lock_waits_then_proceeds() {
        let mut e = engine();
        let a = e.begin(vec![w(1, 1)]);
        let b = e.begin(vec![w(1, 2)]);
        assert_eq!(e.execute_op(a, CCAction::LockImmediate), Ok(OpOutcome::Ok));
        assert_eq!(e.execute_op(b, CCAction::LockImmediate), Ok(OpOutcome::Blocked));
        e.advance(3);
        assert_eq!(e.execute_op(b, CCAction::LockImmediate), Ok(OpOutcome::Blocked));
        e.validate_and_commit(a).unwrap();
        assert_eq!(e.execute_op(b, CCAction::LockImmediate), Ok(OpOutcome::Waited(3)));
        assert_eq!(e.validate_and_commit(b), Ok(CommitOutcome::Committed));
        assert_eq!(e.get(Key(1)), Record::new(Key(1), 2, 2));
    }

    #[test]
    fn optimistic_read_records_version() {
        let mut e = engine();
        let t = e.begin(vec![r(3)]);
        assert_eq!(e.execute_op(t, CCAction::OptimisticNoLock), Ok(OpOutcome::Ok));
        assert_eq!(e.txn(t).unwrap().observed.get(&Key(3)), Some(&0));
        assert!(e.locks().is_empty());
    }

    #[test]
    fn stale_optimistic_read_aborts() {
        let mut e = engine();
        let reader = e.begin(vec![r(1)]);
        e.execute_op(reader, CCAction::OptimisticNoLock).unwrap();
        let writer = e.begin(vec![w(1, 9)]);
        e.execute_op(writer, CCAction::LockImmediate).unwrap();
        e.validate_and_commit(writer).unwrap();
        assert_eq!(e.validate_and_commit(reader), Ok(CommitOutcome::Aborted(AbortReason::Conflict)));
    }

    #[test]
    fn locked_only_txn_commits() {
        let mut e = engine();
        let t = e.begin(vec![r(1), w(2, 3)]);
        e.execute_op(t, CCAction::LockImmediate).unwrap();
        e.execute_op(t, CCAction::LockImmediate).unwrap();
        assert_eq!(e.validate_and_commit(t), Ok(CommitOutcome::Committed));
    }

    #[test]
    fn two_optimistic_writers_one_wins() {
        // Both interleavings of the two commits.
        for first_commits in [0usize, 1] {
            let mut e = engine();
            let ids = [e.begin(vec![w(1, 10)]), e.begin(vec![w(1, 20)])];
            for &id in &ids {
                e.execute_op(id, CCAction::OptimisticNoLock).unwrap();
            }
            let a = e.validate_and_commit(ids[first_commits]).unwrap();
            let b = e.validate_and_commit(ids[1 - first_commits]).unwrap();
            assert_eq!(a, CommitOutcome::Committed);
            assert_eq!(b, CommitOutcome::Aborted(AbortReason::Conflict));
            assert_eq!(e.get(Key(1)).version, 1);
        }
    }

    #[test]
    fn optimistic_write_under_foreign_lock_aborts() {
        let mut e = engine();
        let locker = e.begin(vec![r(1)]);
        e.execute_op(locker, CCAction::LockImmediate).unwrap();
        let opt = e.begin(vec![w(1, 4)]);
        assert_eq!(e.execute_op(opt, CCAction::OptimisticNoLock), Ok(OpOutcome::ConflictNoted));
        assert_eq!(e.validate_and_commit(opt), Ok(CommitOutcome::Aborted(AbortReason::Conflict)));
        assert_eq!(e.validate_and_commit(locker), Ok(CommitOutcome::Committed));
    }

    #[test]
    fn deadlock_aborts_youngest() {
        let mut e = engine();
        let old = e.begin(vec![w(1, 1), w(2, 1)]);
        let young = e.begin(vec![w(2, 2), w(1, 2)]);
        e.execute_op(old, CCAction::LockImmediate).unwrap();
        e.execute_op(young, CCAction::LockImmediate).unwrap();
        assert_eq!(e.execute_op(old, CCAction::LockImmediate), Ok(OpOutcome::Blocked));
        // The young txn closes the cycle and is the victim.
        assert_eq!(e.execute_op(young, CCAction::LockImmediate), Err(EngineError::Deadlock(young)));
        assert_eq!(e.status(young), Some(TxnStatus::Aborted(AbortReason::Deadlock)));
        assert!(matches!(e.execute_op(old, CCAction::LockImmediate), Ok(OpOutcome::Waited(_))));
        assert_eq!(e.validate_and_commit(old), Ok(CommitOutcome::Committed));
        assert!(e.locks().is_empty());
    }

    #[test]
    fn deadlock_victim_may_be_other_txn() {
        let mut e = engine();
        let old = e.begin(vec![w(1, 1), w(2, 1)]);
        let young = e.begin(vec![w(2, 2), w(1, 2)]);
        e.execute_op(old, CCAction::LockImmediate).unwrap();
        e.execute_op(young, CCAction::LockImmediate).unwrap();
        assert_eq!(e.execute_op(young, CCAction::LockImmediate), Ok(OpOutcome::Blocked));
        // The old txn closes the cycle; the young one still dies and the old
        // one proceeds in the same call.
        assert!(matches!(e.execute_op(old, CCAction::LockImmediate), Ok(OpOutcome::Waited(0))));
        assert_eq!(e.status(young), Some(TxnStatus::Aborted(AbortReason::Deadlock)));
    }

    #[test]
    fn read_your_writes() {
        let mut e = engine();
        let t = e.begin(vec![w(1, 7), r(1)]);
        e.execute_op(t, CCAction::OptimisticNoLock).unwrap();
        e.execute_op(t, CCAction::OptimisticNoLock).unwrap();
        assert_eq!(e.txn(t).unwrap().reads, vec![(Key(1), 7)]);
    }

    #[test]
    fn lifecycle_errors() {
        let mut e = engine();
        let t = e.begin(vec![r(1)]);
        assert_eq!(e.validate_and_commit(t), Err(EngineError::OpsPending(t)));
        e.execute_op(t, CCAction::OptimisticNoLock).unwrap();
        assert_eq!(e.execute_op(t, CCAction::OptimisticNoLock), Err(EngineError::NoPendingOps(t)));
        e.validate_and_commit(t).unwrap();
        assert_eq!(e.validate_and_commit(t), Err(EngineError::NotActive(t)));
        assert_eq!(e.execute_op(TxnId(99), CCAction::LockImmediate), Err(EngineError::UnknownTxn(TxnId(99))));
    }

    #[test]
    fn record_encoding_roundtrip() {
        let rec = Record::new(Key(4), -12, 7);
        assert_eq!(Record::decode(&rec.encode()), rec);
        assert!(rec.checksum_matches());
    }
}
