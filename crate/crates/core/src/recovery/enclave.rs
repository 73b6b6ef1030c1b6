// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use hmac::{KeyInit, Mac};
use sha2::{Digest, Sha256};

type HmacSha256 = hmac::Hmac<Sha256>;

/// Key-isolated signer standing in for a trusted enclave. The MAC key lives
/// only here and is never encoded into any output.
#[derive(Clone)]
pub struct EnclaveSim {
    mac_key: [u8; 32],
}

impl fmt::Debug for EnclaveSim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveSim").field("mac_key", &"<sealed>").finish()
    }
}

impl EnclaveSim {
    pub fn from_seed(seed: u64) -> EnclaveSim {
        let mut h = Sha256::new();
        h.update(b"frp-enclave-key");
        h.update(seed.to_le_bytes());
        EnclaveSim { mac_key: h.finalize().into() }
    }

    fn mac(&self, parts: &[&[u8]]) -> HmacSha256 {
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&self.mac_key).expect("any key length");
        for p in parts {
            mac.update(p);
        }
        mac
    }

    pub fn sign(&self, parts: &[&[u8]]) -> [u8; 32] {
        self.mac(parts).finalize().into_bytes().into()
    }

    pub fn verify(&self, parts: &[&[u8]], tag: &[u8; 32]) -> bool {
        self.mac(parts).verify_slice(tag).is_ok()
    }

    #[cfg(test)]
    pub(crate) fn key_bytes(&self) -> [u8; 32] {
        self.mac_key
    }
}
