// SPDX-License-Identifier: Apache-2.0

//! Tamper-evident redo logging with anchor records.
//!
//! Every committed write appends a [`RedoEntry`]. Every `n`-th modification
//! of a key also appends an [`AnchorEntry`] with the key's full post-write
//! state, so repairing a key replays fewer than `n` redo entries. Each
//! transaction's entries are hashed and the digest is MAC-signed by the
//! [`EnclaveSim`], so edits to the log itself are caught before replay.

mod codec;
mod enclave;

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{Key, Record, TxnId};

pub use codec::{DigestAlg, LogHeader, FORMAT_VERSION, MAGIC};
pub use enclave::EnclaveSim;

pub type Lsn = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("anchor interval must be positive")]
    ZeroInterval,
    #[error("recovery refused for {key}: {reason}")]
    RecoveryRefused { key: Key, reason: String },
    #[error("malformed log: {0}")]
    Format(String),
    #[error("log i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for RecoveryError {
    fn from(e: std::io::Error) -> Self {
        RecoveryError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RedoEntry {
    pub lsn: Lsn,
    pub txn_id: TxnId,
    pub key: Key,
    pub new_value: i64,
    pub mod_index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AnchorEntry {
    pub lsn: Lsn,
    pub txn_id: TxnId,
    pub key: Key,
    pub full_value: i64,
    pub full_version: u64,
    pub mod_index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TxnSeal {
    pub lsn: Lsn,
    pub txn_id: TxnId,
    pub first_lsn: Lsn,
    pub entry_count: u32,
    pub digest: [u8; 32],
    pub signature: [u8; 32],
}

impl TxnSeal {
    /// Sealed entries, or `None` for a transaction that wrote nothing.
    pub fn entry_range(&self) -> Option<RangeInclusive<Lsn>> {
        (self.entry_count > 0).then(|| self.first_lsn..=self.first_lsn + self.entry_count as u64 - 1)
    }

    fn covers(&self, lsn: Lsn) -> bool {
        self.entry_range().is_some_and(|r| r.contains(&lsn))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LogRecord {
    Redo(RedoEntry),
    Anchor(AnchorEntry),
    Seal(TxnSeal),
}

impl LogRecord {
    pub fn lsn(&self) -> Lsn {
        match self {
            LogRecord::Redo(e) => e.lsn,
            LogRecord::Anchor(e) => e.lsn,
            LogRecord::Seal(e) => e.lsn,
        }
    }

    pub fn txn_id(&self) -> TxnId {
        match self {
            LogRecord::Redo(e) => e.txn_id,
            LogRecord::Anchor(e) => e.txn_id,
            LogRecord::Seal(e) => e.txn_id,
        }
    }
}

/// Outcome of repairing one key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecoveryReport {
    pub record: Record,
    /// Redo entries applied after the starting point.
    pub replayed: usize,
    /// Modification index of the anchor replay started from.
    pub anchor_mod_index: Option<u64>,
}

#[derive(Clone, Debug, Default)]
struct KeyIndex {
    anchor: Option<usize>,
    redo_since_anchor: Vec<usize>,
    latest_value: i64,
    latest_version: u64,
}

pub struct RecoveryLog {
    header: LogHeader,
    header_tag: [u8; 32],
    records: Vec<LogRecord>,
    enclave: EnclaveSim,
    /// First lsn of each transaction appended but not yet sealed.
    open: BTreeMap<TxnId, Lsn>,
    keys: HashMap<Key, KeyIndex>,
    seals: HashMap<TxnId, usize>,
}

impl RecoveryLog {
    pub fn new(anchor_interval: u64, enclave_seed: u64) -> RecoveryLog {
        RecoveryLog::with_enclave(anchor_interval, EnclaveSim::from_seed(enclave_seed))
            .expect("positive anchor interval")
    }

    pub fn with_enclave(anchor_interval: u64, enclave: EnclaveSim) -> Result<RecoveryLog, RecoveryError> {
        if anchor_interval == 0 || anchor_interval > u32::MAX as u64 {
            return Err(RecoveryError::ZeroInterval);
        }
        let header = LogHeader { version: FORMAT_VERSION, digest_alg: DigestAlg::Sha256HmacSha256, anchor_interval };
        let header_tag = enclave.sign(&[b"header", &header.encode_fields()]);
        Ok(RecoveryLog {
            header,
            header_tag,
            records: Vec::new(),
            enclave,
            open: BTreeMap::new(),
            keys: HashMap::new(),
            seals: HashMap::new(),
        })
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    pub fn anchor_interval(&self) -> u64 {
        self.header.anchor_interval
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Mutable view of the untrusted log storage. Call [`Self::reindex`]
    /// after editing.
    pub fn records_mut(&mut self) -> &mut Vec<LogRecord> {
        &mut self.records
    }

    pub fn last_lsn(&self) -> Option<Lsn> {
        self.records.last().map(LogRecord::lsn)
    }

    fn next_lsn(&self) -> Lsn {
        self.last_lsn().map_or(1, |l| l + 1)
    }

    pub fn open_txn(&mut self, txn: TxnId) -> Result<(), RecoveryError> {
        let next = self.next_lsn();
        self.open.entry(txn).or_insert(next);
        Ok(())
    }

    /// Append a redo entry, plus an anchor on every `n`-th modification of
    /// the key. Returns the redo entry's lsn.
    pub fn append_redo(&mut self, txn: TxnId, key: Key, new_value: i64) -> Result<Lsn, RecoveryError> {
        self.open_txn(txn)?;
        let n = self.header.anchor_interval;
        let idx = self.keys.entry(key).or_default();
        let mod_index = idx.latest_version + 1;
        let lsn = self.next_lsn();
        self.push(LogRecord::Redo(RedoEntry { lsn, txn_id: txn, key, new_value, mod_index }));
        if mod_index.is_multiple_of(n) {
            self.push(LogRecord::Anchor(AnchorEntry {
                lsn: lsn + 1,
                txn_id: txn,
                key,
                full_value: new_value,
                full_version: mod_index,
                mod_index,
            }));
        }
        Ok(lsn)
    }

    /// Digest and sign the transaction's entries, then append the seal.
    pub fn seal_txn(&mut self, txn: TxnId) -> Result<TxnSeal, RecoveryError> {
        let first_lsn = self.open.remove(&txn).ok_or(RecoveryError::UnknownTxn(txn))?;
        let lsn = self.next_lsn();
        let entries = &self.records[(first_lsn - 1) as usize..];
        debug_assert!(entries.iter().all(|r| r.txn_id() == txn));
        let digest = entries_digest(txn, entries);
        let entry_count = entries.len() as u32;
        let signature = self.enclave.sign(&[&seal_message(lsn, txn, first_lsn, entry_count, &digest)]);
        let seal = TxnSeal { lsn, txn_id: txn, first_lsn, entry_count, digest, signature };
        self.push(LogRecord::Seal(seal));
        Ok(seal)
    }

    fn push(&mut self, record: LogRecord) {
        let pos = self.records.len();
        self.records.push(record);
        index_record(&mut self.keys, &mut self.seals, pos, &record);
    }

    /// Rebuild the per-key and seal indexes from storage.
    pub fn reindex(&mut self) {
        self.keys.clear();
        self.seals.clear();
        for (pos, rec) in self.records.iter().enumerate() {
            index_record(&mut self.keys, &mut self.seals, pos, rec);
        }
    }

    /// State the sealed log says `key` should be in.
    pub fn expected_state(&self, key: Key) -> (i64, u64) {
        self.keys.get(&key).map_or((0, 0), |i| (i.latest_value, i.latest_version))
    }

    /// Checksum mismatch, or disagreement with the latest logged state.
    pub fn detect_tamper(&self, key: Key, stored: &Record) -> bool {
        stored.key != key || !stored.checksum_matches() || self.expected_state(key) != (stored.value, stored.version)
    }

    fn seal_verifies(&self, seal: &TxnSeal) -> bool {
        let msg = seal_message(seal.lsn, seal.txn_id, seal.first_lsn, seal.entry_count, &seal.digest);
        if !self.enclave.verify(&[&msg], &seal.signature) {
            return false;
        }
        let Some(range) = seal.entry_range() else {
            return true;
        };
        let (lo, hi) = (*range.start() as usize, *range.end() as usize);
        if lo == 0 || hi > self.records.len() || seal.lsn <= *range.end() {
            return false;
        }
        let entries = &self.records[lo - 1..hi];
        entries.iter().enumerate().all(|(i, r)| {
            r.lsn() == lo as Lsn + i as Lsn && r.txn_id() == seal.txn_id && !matches!(r, LogRecord::Seal(_))
        }) && entries_digest(seal.txn_id, entries) == seal.digest
    }

    fn header_verifies(&self) -> bool {
        self.enclave.verify(&[b"header", &self.header.encode_fields()], &self.header_tag)
    }

    /// Seal covering an entry at storage position `pos`, if it verifies.
    fn verified_seal_for(&self, pos: usize) -> Option<&TxnSeal> {
        let rec = self.records.get(pos)?;
        let seal_pos = *self.seals.get(&rec.txn_id())?;
        match &self.records[seal_pos] {
            LogRecord::Seal(s) if s.covers(rec.lsn()) && self.seal_verifies(s) => Some(s),
            _ => None,
        }
    }

    /// True iff lsns in `range` are present, gap-free and monotone, every
    /// seal in the range verifies, and every entry in it is covered by a
    /// verifying seal.
    pub fn verify_range(&self, range: RangeInclusive<Lsn>) -> bool {
        if !self.header_verifies() {
            return false;
        }
        for lsn in range {
            let Some(pos) = lsn.checked_sub(1).map(|p| p as usize) else {
                return false;
            };
            let Some(rec) = self.records.get(pos) else {
                return false;
            };
            if rec.lsn() != lsn {
                return false;
            }
            let ok = match rec {
                LogRecord::Seal(s) => self.seal_verifies(s) && self.seals.get(&s.txn_id) == Some(&pos),
                _ => self.verified_seal_for(pos).is_some(),
            };
            if !ok {
                return false;
            }
        }
        true
    }

    pub fn verify_log(&self) -> bool {
        match self.last_lsn() {
            None => self.header_verifies(),
            Some(last) => self.records.len() as Lsn == last && self.verify_range(1..=last),
        }
    }

    /// Rebuild `key` from its latest anchor (or the initial state) by
    /// replaying later redo entries. Refuses if any record involved fails
    /// seal verification.
    pub fn recover(&self, key: Key) -> Result<RecoveryReport, RecoveryError> {
        let refuse = |reason: &str| RecoveryError::RecoveryRefused { key, reason: reason.to_string() };
        if !self.header_verifies() {
            return Err(refuse("log header signature invalid"));
        }
        let Some(idx) = self.keys.get(&key) else {
            return Ok(RecoveryReport { record: Record::initial(key), replayed: 0, anchor_mod_index: None });
        };
        let (mut value, mut version, anchor_mod_index) = match idx.anchor {
            Some(pos) => {
                self.verified_seal_for(pos).ok_or_else(|| refuse("anchor seal invalid"))?;
                match self.records[pos] {
                    LogRecord::Anchor(a) if a.key == key && a.full_version == a.mod_index => {
                        (a.full_value, a.full_version, Some(a.mod_index))
                    }
                    _ => return Err(refuse("anchor record malformed")),
                }
            }
            None => (0, 0, None),
        };
        for &pos in &idx.redo_since_anchor {
            self.verified_seal_for(pos).ok_or_else(|| refuse("redo seal invalid"))?;
            match self.records[pos] {
                LogRecord::Redo(r) if r.key == key && r.mod_index == version + 1 => {
                    value = r.new_value;
                    version = r.mod_index;
                }
                _ => return Err(refuse("redo chain broken")),
            }
        }
        Ok(RecoveryReport {
            record: Record::new(key, value, version),
            replayed: idx.redo_since_anchor.len(),
            anchor_mod_index,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::encode(&self.header, &self.header_tag, &self.records)
    }

    /// Parse a log image; the enclave must hold the key it was signed with.
    pub fn decode(bytes: &[u8], enclave: EnclaveSim) -> Result<RecoveryLog, RecoveryError> {
        let (header, header_tag, records) = codec::decode(bytes)?;
        let mut log = RecoveryLog {
            header,
            header_tag,
            records,
            enclave,
            open: BTreeMap::new(),
            keys: HashMap::new(),
            seals: HashMap::new(),
        };
        log.reindex();
        Ok(log)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), RecoveryError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read_from(path: &Path, enclave: EnclaveSim) -> Result<RecoveryLog, RecoveryError> {
        RecoveryLog::decode(&std::fs::read(path)?, enclave)
    }
}

fn index_record(keys: &mut HashMap<Key, KeyIndex>, seals: &mut HashMap<TxnId, usize>, pos: usize, rec: &LogRecord) {
    match rec {
        LogRecord::Redo(r) => {
            let idx = keys.entry(r.key).or_default();
            idx.redo_since_anchor.push(pos);
            idx.latest_value = r.new_value;
            idx.latest_version = r.mod_index;
        }
        LogRecord::Anchor(a) => {
            let idx = keys.entry(a.key).or_default();
            idx.anchor = Some(pos);
            idx.redo_since_anchor.clear();
        }
        LogRecord::Seal(s) => {
            seals.insert(s.txn_id, pos);
        }
    }
}

fn entries_digest(txn: TxnId, entries: &[LogRecord]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"frp-txn-digest");
    h.update(txn.0.to_le_bytes());
    let mut buf = Vec::with_capacity(64);
    for e in entries {
        buf.clear();
        codec::encode_body(e, &mut buf);
        h.update((buf.len() as u32).to_le_bytes());
        h.update(&buf);
    }
    h.finalize().into()
}

fn seal_message(lsn: Lsn, txn: TxnId, first: Lsn, count: u32, digest: &[u8; 32]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(64);
    msg.extend_from_slice(b"seal");
    msg.extend_from_slice(&lsn.to_le_bytes());
    msg.extend_from_slice(&txn.0.to_le_bytes());
    msg.extend_from_slice(&first.to_le_bytes());
    msg.extend_from_slice(&count.to_le_bytes());
    msg.extend_from_slice(digest);
    msg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_with(n: u64, writes: &[(u64, u32, i64)]) -> RecoveryLog {
        let mut log = RecoveryLog::new(n, 1);
        let mut current = None;
        for &(txn, key, value) in writes {
            if current.is_some_and(|c| c != txn) {
                log.seal_txn(TxnId(current.unwrap())).unwrap();
            }
            current = Some(txn);
            log.append_redo(TxnId(txn), Key(key), value).unwrap();
        }
        if let Some(c) = current {
            log.seal_txn(TxnId(c)).unwrap();
        }
        log
    }

    #[test]
    fn anchors_every_n_modifications() {
        let writes: Vec<_> = (0..10).map(|i| (i as u64 + 1, 7, i as i64 * 10)).collect();
        let log = log_with(4, &writes);
        let anchors: Vec<u64> = log
            .records()
            .iter()
            .filter_map(|r| match r {
                LogRecord::Anchor(a) => Some(a.mod_index),
                _ => None,
            })
            .collect();
        assert_eq!(anchors, vec![4, 8]);
        assert!(log.verify_log());
    }

    #[test]
    fn nth_modification_anchor_holds_new_content() {
        let log = log_with(2, &[(1, 3, 11), (2, 3, 22)]);
        let anchor = log.records().iter().find_map(|r| match r {
            LogRecord::Anchor(a) => Some(*a),
            _ => None,
        });
        let a = anchor.unwrap();
        assert_eq!((a.full_value, a.full_version, a.mod_index), (22, 2, 2));
    }

    #[test]
    fn interval_one_anchors_every_write() {
        let log = log_with(1, &[(1, 1, 5), (1, 2, 6), (2, 1, 7)]);
        let redo = log.records().iter().filter(|r| matches!(r, LogRecord::Redo(_))).count();
        let anchors = log.records().iter().filter(|r| matches!(r, LogRecord::Anchor(_))).count();
        assert_eq!(redo, 3);
        assert_eq!(anchors, 3);
    }

    #[test]
    fn empty_seal_is_valid() {
        let mut log = RecoveryLog::new(4, 1);
        log.open_txn(TxnId(9)).unwrap();
        let seal = log.seal_txn(TxnId(9)).unwrap();
        assert_eq!(seal.entry_range(), None);
        assert!(log.verify_log());
        assert!(matches!(log.seal_txn(TxnId(10)), Err(RecoveryError::UnknownTxn(_))));
    }

    #[test]
    fn distinct_txns_distinct_digests() {
        let log = log_with(4, &[(1, 1, 5), (2, 1, 5)]);
        let digests: Vec<_> = log
            .records()
            .iter()
            .filter_map(|r| match r {
                LogRecord::Seal(s) => Some(s.digest),
                _ => None,
            })
            .collect();
        assert_eq!(digests.len(), 2);
        assert_ne!(digests[0], digests[1]);
    }

    #[test]
    fn replay_from_latest_anchor() {
        let writes: Vec<_> = (0..10).map(|i| (i as u64 + 1, 7, 100 + i as i64)).collect();
        let log = log_with(4, &writes);
        let report = log.recover(Key(7)).unwrap();
        assert_eq!(report.anchor_mod_index, Some(8));
        assert_eq!(report.replayed, 2);
        assert_eq!(report.record, Record::new(Key(7), 109, 10));
    }

    #[test]
    fn never_written_key_recovers_initial() {
        let log = log_with(4, &[(1, 1, 5)]);
        let r = log.recover(Key(42)).unwrap();
        assert_eq!(r.record, Record::initial(Key(42)));
        assert_eq!(r.replayed, 0);
    }

    #[test]
    fn detects_value_overwrite_and_rollback() {
        let log = log_with(4, &[(1, 1, 5), (2, 1, 6)]);
        assert!(!log.detect_tamper(Key(1), &Record::new(Key(1), 6, 2)));
        let mut overwritten = Record::new(Key(1), 6, 2);
        overwritten.value = 99;
        assert!(log.detect_tamper(Key(1), &overwritten));
        // Consistent checksum, stale version.
        assert!(log.detect_tamper(Key(1), &Record::new(Key(1), 5, 1)));
    }

    #[test]
    fn deleted_entry_breaks_verification() {
        let mut log = log_with(4, &[(1, 1, 5), (2, 2, 6), (3, 1, 7)]);
        log.records_mut().remove(2);
        log.reindex();
        assert!(!log.verify_log());
    }

    #[test]
    fn flipped_signature_breaks_verification() {
        let mut log = log_with(4, &[(1, 1, 5), (2, 2, 6)]);
        if let Some(LogRecord::Seal(s)) = log.records_mut().last_mut() {
            s.signature[0] ^= 1;
        }
        log.reindex();
        assert!(!log.verify_log());
        assert!(log.recover(Key(2)).is_err());
        assert!(log.recover(Key(1)).is_ok());
    }

    #[test]
    fn tampered_redo_refuses_recovery() {
        let mut log = log_with(4, &[(1, 1, 5), (2, 1, 6)]);
        if let Some(LogRecord::Redo(r)) = log.records_mut().get_mut(2) {
            r.new_value = 1000;
        }
        log.reindex();
        assert!(matches!(log.recover(Key(1)), Err(RecoveryError::RecoveryRefused { .. })));
    }

    #[test]
    fn mac_key_never_serialized() {
        let log = log_with(2, &[(1, 1, 5), (1, 2, 6), (2, 1, 7)]);
        let bytes = log.encode();
        let key = EnclaveSim::from_seed(1).key_bytes();
        assert!(!bytes.windows(32).any(|w| w == key));
        assert!(!format!("{:?}", log.records()).contains(&hex::encode(key)));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let log = log_with(2, &[(1, 1, 5), (1, 2, 6), (2, 1, 7)]);
        let back = RecoveryLog::decode(&log.encode(), EnclaveSim::from_seed(1)).unwrap();
        assert_eq!(back.records(), log.records());
        assert!(back.verify_log());
        // Wrong enclave key: nothing verifies.
        let foreign = RecoveryLog::decode(&log.encode(), EnclaveSim::from_seed(2)).unwrap();
        assert!(!foreign.verify_log());
    }
}
