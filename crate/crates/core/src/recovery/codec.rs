// SPDX-License-Identifier: Apache-2.0

//! Log file layout, little-endian throughout:
//!
//! ```text
//! header:  magic "FRPLOG" | version u16 | digest alg u8 | anchor interval u32 | header MAC [32]
//! record:  body length u32 | body
//! body:    tag u8 (1 redo, 2 anchor, 3 seal) | fields
//!   redo:   lsn u64 | txn u64 | key u32 | new_value i64 | mod_index u64
//!   anchor: lsn u64 | txn u64 | key u32 | full_value i64 | full_version u64 | mod_index u64
//!   seal:   lsn u64 | txn u64 | first_lsn u64 | entry_count u32 | digest [32] | signature [32]
//! ```

use serde::Serialize;

use super::{AnchorEntry, LogRecord, RecoveryError, RedoEntry, TxnSeal};
use crate::engine::{Key, TxnId};

pub const MAGIC: &[u8; 6] = b"FRPLOG";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 6 + 2 + 1 + 4 + 32;

const TAG_REDO: u8 = 1;
const TAG_ANCHOR: u8 = 2;
const TAG_SEAL: u8 = 3;
const REDO_LEN: usize = 1 + 8 + 8 + 4 + 8 + 8;
const ANCHOR_LEN: usize = REDO_LEN + 8;
const SEAL_LEN: usize = 1 + 8 + 8 + 8 + 4 + 32 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DigestAlg {
    /// SHA-256 digests, HMAC-SHA-256 signatures.
    Sha256HmacSha256 = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LogHeader {
    pub version: u16,
    pub digest_alg: DigestAlg,
    pub anchor_interval: u64,
}

impl LogHeader {
    /// Header bytes covered by the header MAC.
    pub fn encode_fields(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN - 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.digest_alg as u8);
        out.extend_from_slice(&(self.anchor_interval as u32).to_le_bytes());
        out
    }
}

pub(super) fn encode_body(rec: &LogRecord, out: &mut Vec<u8>) {
    match rec {
        LogRecord::Redo(r) => {
            out.push(TAG_REDO);
            out.extend_from_slice(&r.lsn.to_le_bytes());
            out.extend_from_slice(&r.txn_id.0.to_le_bytes());
            out.extend_from_slice(&r.key.0.to_le_bytes());
            out.extend_from_slice(&r.new_value.to_le_bytes());
            out.extend_from_slice(&r.mod_index.to_le_bytes());
        }
        LogRecord::Anchor(a) => {
            out.push(TAG_ANCHOR);
            out.extend_from_slice(&a.lsn.to_le_bytes());
            out.extend_from_slice(&a.txn_id.0.to_le_bytes());
            out.extend_from_slice(&a.key.0.to_le_bytes());
            out.extend_from_slice(&a.full_value.to_le_bytes());
            out.extend_from_slice(&a.full_version.to_le_bytes());
            out.extend_from_slice(&a.mod_index.to_le_bytes());
        }
        LogRecord::Seal(s) => {
            out.push(TAG_SEAL);
            out.extend_from_slice(&s.lsn.to_le_bytes());
            out.extend_from_slice(&s.txn_id.0.to_le_bytes());
            out.extend_from_slice(&s.first_lsn.to_le_bytes());
            out.extend_from_slice(&s.entry_count.to_le_bytes());
            out.extend_from_slice(&s.digest);
            out.extend_from_slice(&s.signature);
        }
    }
}

pub(super) fn encode(header: &LogHeader, tag: &[u8; 32], records: &[LogRecord]) -> Vec<u8> {
    let mut out = header.encode_fields();
    out.extend_from_slice(tag);
    let mut body = Vec::with_capacity(SEAL_LEN);
    for rec in records {
        body.clear();
        encode_body(rec, &mut body);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RecoveryError> {
        if self.buf.len() < n {
            return Err(RecoveryError::Format("truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], RecoveryError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, RecoveryError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, RecoveryError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, RecoveryError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, RecoveryError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i64(&mut self) -> Result<i64, RecoveryError> {
        Ok(i64::from_le_bytes(self.array()?))
    }
}

fn decode_body(body: &[u8]) -> Result<LogRecord, RecoveryError> {
    let bad_len = || RecoveryError::Format(format!("record body of {} bytes", body.len()));
    let mut r = Reader { buf: body };
    let rec = match r.u8()? {
        TAG_REDO if body.len() == REDO_LEN => LogRecord::Redo(RedoEntry {
            lsn: r.u64()?,
            txn_id: TxnId(r.u64()?),
            key: Key(r.u32()?),
            new_value: r.i64()?,
            mod_index: r.u64()?,
        }),
        TAG_ANCHOR if body.len() == ANCHOR_LEN => LogRecord::Anchor(AnchorEntry {
            lsn: r.u64()?,
            txn_id: TxnId(r.u64()?),
            key: Key(r.u32()?),
            full_value: r.i64()?,
            full_version: r.u64()?,
            mod_index: r.u64()?,
        }),
        TAG_SEAL if body.len() == SEAL_LEN => LogRecord::Seal(TxnSeal {
            lsn: r.u64()?,
            txn_id: TxnId(r.u64()?),
            first_lsn: r.u64()?,
            entry_count: r.u32()?,
            digest: r.array()?,
            signature: r.array()?,
        }),
        TAG_REDO | TAG_ANCHOR | TAG_SEAL => return Err(bad_len()),
        tag => return Err(RecoveryError::Format(format!("unknown record tag {tag}"))),
    };
    Ok(rec)
}

pub(super) fn decode(bytes: &[u8]) -> Result<(LogHeader, [u8; 32], Vec<LogRecord>), RecoveryError> {
    let mut r = Reader { buf: bytes };
    if r.take(6)? != MAGIC {
        return Err(RecoveryError::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(RecoveryError::Format(format!("unsupported version {version}")));
    }
    let digest_alg = match r.u8()? {
        1 => DigestAlg::Sha256HmacSha256,
        other => return Err(RecoveryError::Format(format!("unknown digest algorithm {other}"))),
    };
    let anchor_interval = r.u32()? as u64;
    if anchor_interval == 0 {
        return Err(RecoveryError::Format("zero anchor interval".into()));
    }
    let tag = r.array()?;
    let mut records = Vec::new();
    while !r.buf.is_empty() {
        let len = r.u32()? as usize;
        records.push(decode_body(r.take(len)?)?);
    }
    Ok((LogHeader { version, digest_alg, anchor_interval }, tag, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"").is_err());
        assert!(decode(b"NOTLOG\x01\x00\x01\x04\x00\x00\x00").is_err());
        let header = LogHeader { version: 1, digest_alg: DigestAlg::Sha256HmacSha256, anchor_interval: 4 };
        let mut bytes = encode(&header, &[0; 32], &[]);
        assert!(decode(&bytes).is_ok());
        bytes.extend_from_slice(&[3, 0, 0, 0, 9, 9, 9]);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn body_lengths_match_layout() {
        let mut buf = Vec::new();
        encode_body(
            &LogRecord::Redo(RedoEntry { lsn: 1, txn_id: TxnId(1), key: Key(1), new_value: 1, mod_index: 1 }),
            &mut buf,
        );
        assert_eq!(buf.len(), REDO_LEN);
        buf.clear();
        encode_body(
            &LogRecord::Seal(TxnSeal {
                lsn: 1,
                txn_id: TxnId(1),
                first_lsn: 1,
                entry_count: 0,
                digest: [0; 32],
                signature: [0; 32],
            }),
            &mut buf,
        );
        assert_eq!(buf.len(), SEAL_LEN);
    }
}
