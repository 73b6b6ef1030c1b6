// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use super::{Key, TxnId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockMode {
    Shared,
    Exclusive,
}

#[derive(Default, Debug, Clone)]
struct LockEntry {
    shared: BTreeSet<TxnId>,
    exclusive: Option<TxnId>,
}

impl LockEntry {
    fn is_free(&self) -> bool {
        self.shared.is_empty() && self.exclusive.is_none()
    }
}

/// Per-key shared/exclusive lock table. No waiter queue: blocked requests
/// are retried by the driver, and the wait-for graph is derived from the
/// current holders.
#[derive(Default, Debug, Clone)]
pub struct LockTable {
    entries: BTreeMap<Key, LockEntry>,
}

impl LockTable {
    /// Grant the lock or return the transactions that block it.
    pub fn try_acquire(&mut self, key: Key, txn: TxnId, mode: LockMode) -> Result<(), Vec<TxnId>> {
        let blockers = self.blockers(key, txn, mode);
        if !blockers.is_empty() {
            return Err(blockers);
        }
        let entry = self.entries.entry(key).or_default();
        match mode {
            LockMode::Shared => {
                if entry.exclusive != Some(txn) {
                    entry.shared.insert(txn);
                }
            }
            LockMode::Exclusive => {
                entry.shared.remove(&txn);
                entry.exclusive = Some(txn);
            }
        }
        Ok(())
    }

    /// Holders whose locks are incompatible with `mode` for `txn`.
    pub fn blockers(&self, key: Key, txn: TxnId, mode: LockMode) -> Vec<TxnId> {
        let Some(entry) = self.entries.get(&key) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        if let Some(x) = entry.exclusive {
            if x != txn {
                out.push(x);
            }
        }
        if mode == LockMode::Exclusive {
            out.extend(entry.shared.iter().copied().filter(|&t| t != txn));
        }
        out
    }

    pub fn holds(&self, key: Key, txn: TxnId, mode: LockMode) -> bool {
        self.entries.get(&key).is_some_and(|e| match mode {
            LockMode::Exclusive => e.exclusive == Some(txn),
            LockMode::Shared => e.exclusive == Some(txn) || e.shared.contains(&txn),
        })
    }

    /// True if any transaction other than `txn` holds a lock on `key`.
    pub fn locked_by_other(&self, key: Key, txn: TxnId) -> bool {
        self.entries
            .get(&key)
            .is_some_and(|e| e.exclusive.is_some_and(|x| x != txn) || e.shared.iter().any(|&t| t != txn))
    }

    pub fn exclusive_by_other(&self, key: Key, txn: TxnId) -> bool {
        self.entries.get(&key).and_then(|e| e.exclusive).is_some_and(|x| x != txn)
    }

    pub fn release<'a>(&mut self, txn: TxnId, keys: impl IntoIterator<Item = &'a Key>) {
        for key in keys {
            if let Some(entry) = self.entries.get_mut(key) {
                entry.shared.remove(&txn);
                if entry.exclusive == Some(txn) {
                    entry.exclusive = None;
                }
                if entry.is_free() {
                    self.entries.remove(key);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}
