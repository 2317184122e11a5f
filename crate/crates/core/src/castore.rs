//! In-process content-addressed object store.
//!
//! Objects are keyed by the SHA-256 digest of their bytes. The text form of a
//! key is `ch1-` followed by 64 lowercase hex digits. Every read from the
//! network re-hashes the payload before handing it out, so a store whose copy
//! was altered is reported instead of served.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const HASH_PREFIX: &str = "ch1-";
pub const HASH_TEXT_LEN: usize = 68;

pub type PeerId = u16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("refusing to store an empty payload")]
    EmptyPayload,
    #[error("object {0} not found")]
    NotFound(ContentHash),
    #[error("object {hash} held by peer {peer} fails its content hash")]
    IntegrityFailure { hash: ContentHash, peer: PeerId },
    #[error("peer {0} is offline")]
    PeerOffline(PeerId),
    #[error("invalid content hash text: {0}")]
    BadHashText(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn from_digest(digest: [u8; 32]) -> Self {
        Self(digest)
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn verify(&self, bytes: &[u8]) -> bool {
        Self::of(bytes) == *self
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{HASH_PREFIX}{}", hex::encode(self.0))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for ContentHash {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StoreError::BadHashText(s.to_string());
        if s.len() != HASH_TEXT_LEN {
            return Err(bad());
        }
        let hex_part = s.strip_prefix(HASH_PREFIX).ok_or_else(bad)?;
        // Uppercase hex would parse but never renders back identically.
        if hex_part.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad());
        }
        let mut digest = [0u8; 32];
        hex::decode_to_slice(hex_part, &mut digest).map_err(|_| bad())?;
        Ok(Self(digest))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredObject {
    pub hash: ContentHash,
    pub bytes: Arc<[u8]>,
}

impl StoredObject {
    pub fn size(&self) -> usize {
        self.bytes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PinReceipt {
    pub hash: ContentHash,
    pub from: PeerId,
    pub to: PeerId,
    /// False when the target already held the object.
    pub copied: bool,
}

/// One peer's local object store. Reads share the lock, writes take it
/// exclusively.
#[derive(Debug)]
pub struct PeerStore {
    peer_id: PeerId,
    objects: RwLock<HashMap<ContentHash, StoredObject>>,
    online: AtomicBool,
}

impl PeerStore {
    pub fn new(peer_id: PeerId) -> Self {
        Self {
            peer_id,
            objects: RwLock::new(HashMap::new()),
            online: AtomicBool::new(true),
        }
    }

    pub fn peer_id(&self) -> PeerId {
        self.peer_id
    }

    pub fn is_online(&self) -> bool {
        self.online.load(Ordering::SeqCst)
    }

    pub fn set_online(&self, online: bool) {
        self.online.store(online, Ordering::SeqCst);
    }

    /// Stores `bytes` under their content hash. Re-adding identical bytes is a
    /// no-op that returns the same hash.
    pub fn add(&self, bytes: &[u8]) -> Result<ContentHash, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyPayload);
        }
        let hash = ContentHash::of(bytes);
        let mut objects = self.objects.write().expect("store lock poisoned");
        objects.entry(hash).or_insert_with(|| StoredObject {
            hash,
            bytes: Arc::from(bytes),
        });
        Ok(hash)
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.objects.read().expect("store lock poisoned").contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.objects.read().expect("store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw local copy, unverified.
    pub fn get_local(&self, hash: &ContentHash) -> Option<Arc<[u8]>> {
        self.objects
            .read()
            .expect("store lock poisoned")
            .get(hash)
            .map(|o| Arc::clone(&o.bytes))
    }

    /// Verified local read.
    pub fn get(&self, hash: &ContentHash) -> Result<Arc<[u8]>, StoreError> {
        let bytes = self.get_local(hash).ok_or(StoreError::NotFound(*hash))?;
        if !hash.verify(&bytes) {
            return Err(StoreError::IntegrityFailure {
                hash: *hash,
                peer: self.peer_id,
            });
        }
        Ok(bytes)
    }

    pub fn remove(&self, hash: &ContentHash) -> bool {
        self.objects
            .write()
            .expect("store lock poisoned")
            .remove(hash)
            .is_some()
    }

    /// Rewrites the stored bytes of `hash` in place, keeping the key. Used to
    /// simulate on-disk corruption or tampering.
    pub fn tamper<F: FnOnce(&mut Vec<u8>)>(&self, hash: &ContentHash, mutate: F) -> bool {
        let mut objects = self.objects.write().expect("store lock poisoned");
        match objects.get_mut(hash) {
            Some(obj) => {
                let mut bytes = obj.bytes.to_vec();
                mutate(&mut bytes);
                obj.bytes = Arc::from(bytes);
                true
            }
            None => false,
        }
    }

    fn insert_verified(&self, obj: StoredObject) -> bool {
        let mut objects = self.objects.write().expect("store lock poisoned");
        if objects.contains_key(&obj.hash) {
            return false;
        }
        objects.insert(obj.hash, obj);
        true
    }
}

/// Copies `hash` from `from` to `to` after verifying the source copy.
pub fn pin(from: &PeerStore, to: &PeerStore, hash: &ContentHash) -> Result<PinReceipt, StoreError> {
    if !from.is_online() {
        return Err(StoreError::PeerOffline(from.peer_id));
    }
    let bytes = from.get(hash)?;
    let copied = to.insert_verified(StoredObject { hash: *hash, bytes });
    Ok(PinReceipt {
        hash: *hash,
        from: from.peer_id,
        to: to.peer_id,
        copied,
    })
}

/// The set of peer stores reachable from any peer. Lookup scans peers in
/// registration order; no routing layer.
#[derive(Debug, Default)]
pub struct StoreNetwork {
    peers: RwLock<Vec<Arc<PeerStore>>>,
}

impl StoreNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_peers(n: u16) -> Self {
        let net = Self::new();
        for id in 0..n {
            net.register(Arc::new(PeerStore::new(id)));
        }
        net
    }

    pub fn register(&self, store: Arc<PeerStore>) {
        self.peers.write().expect("network lock poisoned").push(store);
    }

    pub fn peer(&self, id: PeerId) -> Option<Arc<PeerStore>> {
        self.peers
            .read()
            .expect("network lock poisoned")
            .iter()
            .find(|p| p.peer_id == id)
            .cloned()
    }

    pub fn peers(&self) -> Vec<Arc<PeerStore>> {
        self.peers.read().expect("network lock poisoned").clone()
    }

    /// Fetches `hash` from any online peer, verifying the bytes. Copies that
    /// fail verification are skipped; if no intact copy exists the first
    /// integrity failure is returned.
    pub fn get(&self, hash: &ContentHash) -> Result<Arc<[u8]>, StoreError> {
        self.get_preferring(None, hash)
    }

    /// Like [`StoreNetwork::get`] but asks `local` first.
    pub fn get_preferring(
        &self,
        local: Option<PeerId>,
        hash: &ContentHash,
    ) -> Result<Arc<[u8]>, StoreError> {
        // Snapshot so no network lock is held while touching peer stores.
        let mut peers = self.peers();
        if let Some(id) = local {
            peers.sort_by_key(|p| p.peer_id != id);
        }
        let mut integrity_failure = None;
        for p in peers.iter().filter(|p| p.is_online()) {
            match p.get(hash) {
                Ok(bytes) => return Ok(bytes),
                Err(e @ StoreError::IntegrityFailure { .. }) => {
                    log::warn!("{e}");
                    integrity_failure.get_or_insert(e);
                }
                Err(_) => {}
            }
        }
        Err(integrity_failure.unwrap_or(StoreError::NotFound(*hash)))
    }

    /// Online peers holding a copy of `hash`.
    pub fn holders(&self, hash: &ContentHash) -> Vec<PeerId> {
        self.peers()
            .iter()
            .filter(|p| p.is_online() && p.contains(hash))
            .map(|p| p.peer_id)
            .collect()
    }
}
