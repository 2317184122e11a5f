//! Authenticated encryption of file payloads.
//!
//! Blob layout: `key_id u16 BE | nonce 12 | tag 16 | ciphertext`. The key id
//! is bound as associated data so a blob cannot be replayed under another id.
//! Nonces are a random 4-byte prefix chosen per [`Sealer`] followed by a
//! 64-bit big-endian counter, so a single key never repeats a nonce within
//! one sealer.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use chacha20poly1305::aead::AeadInPlace;
use chacha20poly1305::{ChaCha20Poly1305, Key, KeyInit, Nonce, Tag};
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const BLOB_HEADER_LEN: usize = 2 + NONCE_LEN + TAG_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("blob of {0} bytes is shorter than its header")]
    Truncated(usize),
    #[error("authentication failed")]
    AuthFailed,
    #[error("no key for id {0}")]
    UnknownKey(u16),
    #[error("key must be {KEY_LEN} bytes of hex")]
    BadKey,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn generate() -> Self {
        let mut k = [0u8; KEY_LEN];
        rand::thread_rng().fill_bytes(&mut k);
        Self(k)
    }

    /// Deterministic key for tests and simulations.
    pub fn derive(label: &str, id: u16) -> Self {
        use sha2::{Digest, Sha256};
        Self(Sha256::new().chain_update(label).chain_update(id.to_be_bytes()).finalize().into())
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.0))
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl FromStr for SymmetricKey {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|_| CryptoError::BadKey)?;
        Ok(Self(bytes.try_into().map_err(|_| CryptoError::BadKey)?))
    }
}

impl Serialize for SymmetricKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SymmetricKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBlob {
    pub key_id: u16,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

impl EncryptedBlob {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.key_id.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < BLOB_HEADER_LEN {
            return Err(CryptoError::Truncated(bytes.len()));
        }
        Ok(Self {
            key_id: u16::from_be_bytes([bytes[0], bytes[1]]),
            nonce: bytes[2..2 + NONCE_LEN].try_into().unwrap(),
            tag: bytes[2 + NONCE_LEN..BLOB_HEADER_LEN].try_into().unwrap(),
            ciphertext: bytes[BLOB_HEADER_LEN..].to_vec(),
        })
    }

    pub fn open(&self, key: &SymmetricKey) -> Result<Vec<u8>, CryptoError> {
        let mut buf = self.ciphertext.clone();
        key.cipher()
            .decrypt_in_place_detached(
                Nonce::from_slice(&self.nonce),
                &self.key_id.to_be_bytes(),
                &mut buf,
                Tag::from_slice(&self.tag),
            )
            .map_err(|_| CryptoError::AuthFailed)?;
        Ok(buf)
    }
}

/// Encrypts under one key with a unique nonce per call.
pub struct Sealer {
    key_id: u16,
    cipher: ChaCha20Poly1305,
    prefix: [u8; 4],
    counter: AtomicU64,
}

impl Sealer {
    pub fn new(key_id: u16, key: &SymmetricKey) -> Self {
        let mut prefix = [0u8; 4];
        rand::thread_rng().fill_bytes(&mut prefix);
        Self {
            key_id,
            cipher: key.cipher(),
            prefix,
            counter: AtomicU64::new(0),
        }
    }

    pub fn key_id(&self) -> u16 {
        self.key_id
    }

    pub fn seal(&self, plaintext: &[u8]) -> EncryptedBlob {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.prefix);
        nonce[4..].copy_from_slice(&n.to_be_bytes());
        let mut ciphertext = plaintext.to_vec();
        let tag = self
            .cipher
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), &self.key_id.to_be_bytes(), &mut ciphertext)
            .expect("plaintext within ChaCha20-Poly1305 length limit");
        EncryptedBlob {
            key_id: self.key_id,
            nonce,
            tag: tag.into(),
            ciphertext,
        }
    }
}
