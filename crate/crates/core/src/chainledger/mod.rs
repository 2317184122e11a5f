//! Proof-of-work hash registry.
//!
//! A single in-process chain stands in for the smart-contract ledger: peers
//! submit `RegisterFiles` and `AnomalySignal` transactions, each charged gas
//! by a [`GasSchedule`], and a miner seals the pending pool into a block
//! whose hash must carry `difficulty` leading zero bits. Reads go through
//! `&self` methods and never touch balances.
//!
//! The byte layout used for hashing is documented in [`codec`].

mod block;
pub mod codec;
mod gas;
mod policy;
mod tx;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use block::{leading_zero_bits, meets_difficulty, Block, BlockHash};
pub use gas::{
    calibrate_schedule, estimate_gas, fit_line, table1_observations, Calibration, GasSchedule,
    LinearFit, HASH_SHARE_OF_INTERCEPT, TABLE1_GAS, TABLE1_NETWORK_SIZE,
};
pub use policy::{canonicalize_policy, AccessPolicy, PolicyMode};
pub use tx::{SignalSummary, Transaction, TxId, TxKind};

use crate::castore::{ContentHash, PeerId};

/// 100 x 10^9 gas units per account.
pub const DEFAULT_INITIAL_BALANCE: u64 = 100_000_000_000;
pub const DEFAULT_DIFFICULTY: u32 = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("unknown account {0}")]
    UnknownAccount(PeerId),
    #[error("insufficient balance: need {needed}, available {available}")]
    InsufficientBalance { needed: u64, available: u64 },
    #[error("file name {name} already registered by peer {owner}")]
    NameTaken { name: String, owner: PeerId },
    #[error("anomaly already signalled by {0}")]
    DuplicateSignal(TxId),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("peer {peer} outside network of {network_size}")]
    PeerOutOfRange { peer: PeerId, network_size: u16 },
    #[error("pending pool is empty")]
    EmptyPool,
    #[error("file {0} is not registered")]
    Unregistered(String),
    #[error("observations span fewer than two distinct policy sizes")]
    DegenerateObservations,
    #[error("gas schedule fields must be positive: {0:?}")]
    InvalidSchedule(GasSchedule),
    #[error("decode error: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub schedule: GasSchedule,
    /// Required leading zero bits of every block hash.
    pub difficulty: u32,
    pub network_size: u16,
    pub initial_balance: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            schedule: GasSchedule::default(),
            difficulty: DEFAULT_DIFFICULTY,
            network_size: 10,
            initial_balance: DEFAULT_INITIAL_BALANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub file_name: String,
    pub hash: ContentHash,
    pub policy: AccessPolicy,
    pub sender: PeerId,
    pub block_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub tx_id: TxId,
    pub block_index: u64,
    pub unit_id: u16,
    pub summary: SignalSummary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegistryQuery {
    All,
    FileName(String),
    Sender(PeerId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainVerdict {
    Ok,
    Invalid { index: u64, reason: String },
}

impl ChainVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainVerdict::Ok)
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    config: ChainConfig,
    blocks: Vec<Block>,
    registry: BTreeMap<String, RegistryEntry>,
    signals: Vec<SignalRecord>,
    pending: Vec<Transaction>,
    accounts: BTreeMap<PeerId, u64>,
    next_nonce: HashMap<PeerId, u64>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl ChainState {
    /// Creates a chain with a mined genesis block and one funded account per peer.
    pub fn new(config: ChainConfig) -> Result<Self, LedgerError> {
        config.schedule.validate()?;
        let genesis = Block::mine(0, [0; 32], now_ms(), Vec::new(), config.difficulty);
        let accounts = (0..config.network_size)
            .map(|p| (p, config.initial_balance))
            .collect();
        Ok(Self {
            config,
            blocks: vec![genesis],
            registry: BTreeMap::new(),
            signals: Vec::new(),
            pending: Vec::new(),
            accounts,
            next_nonce: HashMap::new(),
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &GasSchedule {
        &self.config.schedule
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Number of blocks including genesis.
    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn balance(&self, peer: PeerId) -> Option<u64> {
        self.accounts.get(&peer).copied()
    }

    pub fn total_balance(&self) -> u64 {
        self.accounts.values().sum()
    }

    pub fn estimate(&self, kind: &TxKind) -> u64 {
        estimate_gas(kind, &self.config.schedule)
    }

    fn reserved(&self, sender: PeerId) -> u64 {
        self.pending
            .iter()
            .filter(|t| t.sender == sender)
            .map(|t| t.gas_used)
            .sum()
    }

    fn check_names(&self, sender: PeerId, entries: &[(String, ContentHash)]) -> Result<(), LedgerError> {
        for (name, _) in entries {
            let mined_owner = self.registry.get(name).map(|e| e.sender);
            let pending_owner = self.pending.iter().find_map(|t| match &t.kind {
                TxKind::RegisterFiles { entries, .. } if entries.iter().any(|(n, _)| n == name) => {
                    Some(t.sender)
                }
                _ => None,
            });
            if let Some(owner) = mined_owner.or(pending_owner).filter(|&o| o != sender) {
                return Err(LedgerError::NameTaken {
                    name: name.clone(),
                    owner,
                });
            }
        }
        Ok(())
    }

    fn existing_signal(&self, summary: &SignalSummary) -> Option<TxId> {
        let key = summary.dedup_key();
        self.signals
            .iter()
            .find(|s| s.summary.dedup_key() == key)
            .map(|s| s.tx_id)
            .or_else(|| {
                self.pending.iter().find_map(|t| match &t.kind {
                    TxKind::AnomalySignal { summary: s, .. } if s.dedup_key() == key => Some(t.id()),
                    _ => None,
                })
            })
    }

    /// Adds a transaction to the pending pool. Gas is computed here and
    /// debited when the transaction is mined.
    pub fn submit_tx(&mut self, sender: PeerId, kind: TxKind) -> Result<TxId, LedgerError> {
        let balance = self
            .balance(sender)
            .ok_or(LedgerError::UnknownAccount(sender))?;
        kind.validate()?;
        match &kind {
            TxKind::RegisterFiles { entries, policy } => {
                if policy.network_size != self.config.network_size {
                    return Err(LedgerError::InvalidPayload(format!(
                        "policy network size {} does not match chain's {}",
                        policy.network_size, self.config.network_size
                    )));
                }
                self.check_names(sender, entries)?;
            }
            TxKind::AnomalySignal { summary, .. } => {
                if let Some(existing) = self.existing_signal(summary) {
                    return Err(LedgerError::DuplicateSignal(existing));
                }
            }
        }
        let gas_used = self.estimate(&kind);
        let available = balance.saturating_sub(self.reserved(sender));
        if available < gas_used {
            return Err(LedgerError::InsufficientBalance {
                needed: gas_used,
                available,
            });
        }
        let nonce = self.next_nonce.entry(sender).or_insert(0);
        let tx = Transaction {
            sender,
            nonce: *nonce,
            gas_used,
            kind,
        };
        *nonce += 1;
        let id = tx.id();
        self.pending.push(tx);
        Ok(id)
    }

    /// Seals every pending transaction, in submission order, into a new block.
    pub fn mine_block(&mut self) -> Result<&Block, LedgerError> {
        if self.pending.is_empty() {
            return Err(LedgerError::EmptyPool);
        }
        let prev = self.blocks.last().expect("genesis present");
        let index = prev.index + 1;
        let timestamp_ms = now_ms().max(prev.timestamp_ms);
        let txs = std::mem::take(&mut self.pending);
        let block = Block::mine(index, prev.block_hash, timestamp_ms, txs, self.config.difficulty);
        for tx in &block.transactions {
            let bal = self.accounts.get_mut(&tx.sender).expect("account checked at submission");
            *bal -= tx.gas_used;
            apply_tx(&mut self.registry, &mut self.signals, tx, index);
        }
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Mines only when something is pending.
    pub fn mine_if_pending(&mut self) -> Option<u64> {
        self.mine_block().ok().map(|b| b.index)
    }

    pub fn verify_chain(&self) -> ChainVerdict {
        let verdict = verify_blocks(&self.blocks, &self.config);
        if !verdict.is_ok() {
            return verdict;
        }
        if replay_registry(&self.blocks) != self.registry {
            return ChainVerdict::Invalid {
                index: self.height(),
                reason: "registry diverges from replayed transactions".into(),
            };
        }
        ChainVerdict::Ok
    }

    pub fn query_registry(&self, query: &RegistryQuery) -> Vec<RegistryEntry> {
        match query {
            RegistryQuery::All => self.registry.values().cloned().collect(),
            RegistryQuery::FileName(name) => self.registry.get(name).cloned().into_iter().collect(),
            RegistryQuery::Sender(peer) => self
                .registry
                .values()
                .filter(|e| e.sender == *peer)
                .cloned()
                .collect(),
        }
    }

    pub fn registry_len(&self) -> usize {
        self.registry.len()
    }

    /// Registrations mined at or after `height`, ordered by block.
    pub fn registrations_since(&self, height: u64) -> Vec<RegistryEntry> {
        let mut out: Vec<RegistryEntry> = self
            .registry
            .values()
            .filter(|e| e.block_index >= height)
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.block_index, &a.file_name).cmp(&(b.block_index, &b.file_name)));
        out
    }

    /// Anomaly signals mined at or after `height`.
    pub fn signals_since(&self, height: u64) -> &[SignalRecord] {
        let start = self.signals.partition_point(|s| s.block_index < height);
        &self.signals[start..]
    }

    pub fn can_access(&self, peer: PeerId, file_name: &str) -> Result<bool, LedgerError> {
        let entry = self
            .registry
            .get(file_name)
            .ok_or_else(|| LedgerError::Unregistered(file_name.to_string()))?;
        Ok(entry.sender == peer || entry.policy.permits(peer))
    }
}

fn apply_tx(
    registry: &mut BTreeMap<String, RegistryEntry>,
    signals: &mut Vec<SignalRecord>,
    tx: &Transaction,
    block_index: u64,
) {
    match &tx.kind {
        TxKind::RegisterFiles { entries, policy } => {
            for (name, hash) in entries {
                registry.insert(
                    name.clone(),
                    RegistryEntry {
                        file_name: name.clone(),
                        hash: *hash,
                        policy: policy.clone(),
                        sender: tx.sender,
                        block_index,
                    },
                );
            }
        }
        TxKind::AnomalySignal { unit_id, summary } => signals.push(SignalRecord {
            tx_id: tx.id(),
            block_index,
            unit_id: *unit_id,
            summary: summary.clone(),
        }),
    }
}

/// Registry obtained by folding every mined registration in block order.
pub fn replay_registry(blocks: &[Block]) -> BTreeMap<String, RegistryEntry> {
    let mut registry = BTreeMap::new();
    let mut signals = Vec::new();
    for b in blocks {
        for tx in &b.transactions {
            apply_tx(&mut registry, &mut signals, tx, b.index);
        }
    }
    registry
}

/// Checks hashes, proof of work, linkage, timestamps, nonces and per-transaction gas.
pub fn verify_blocks(blocks: &[Block], config: &ChainConfig) -> ChainVerdict {
    let mut nonces: HashMap<PeerId, u64> = HashMap::new();
    let mut signal_keys: HashSet<(String, u64)> = HashSet::new();
    for (pos, b) in blocks.iter().enumerate() {
        let invalid = |reason: String| ChainVerdict::Invalid {
            index: pos as u64,
            reason,
        };
        if b.index != pos as u64 {
            return invalid(format!("index {} at position {pos}", b.index));
        }
        if b.compute_hash() != b.block_hash {
            return invalid("block hash mismatch".into());
        }
        if !meets_difficulty(&b.block_hash, config.difficulty) {
            return invalid("insufficient proof of work".into());
        }
        let expected_prev = if pos == 0 {
            [0; 32]
        } else {
            blocks[pos - 1].block_hash
        };
        if b.prev_hash != expected_prev {
            return invalid("prev_hash does not link to predecessor".into());
        }
        if pos > 0 && b.timestamp_ms < blocks[pos - 1].timestamp_ms {
            return invalid("timestamp decreases".into());
        }
        for tx in &b.transactions {
            if let Err(e) = tx.kind.validate() {
                return invalid(format!("{}: {e}", tx.id()));
            }
            if tx.gas_used != estimate_gas(&tx.kind, &config.schedule) {
                return invalid(format!("{}: gas_used does not match schedule", tx.id()));
            }
            let next = nonces.entry(tx.sender).or_insert(0);
            if tx.nonce < *next {
                return invalid(format!("{}: nonce not increasing", tx.id()));
            }
            *next = tx.nonce + 1;
            if let TxKind::AnomalySignal { summary, .. } = &tx.kind {
                if !signal_keys.insert((summary.file_name.clone(), summary.window_index)) {
                    return invalid(format!("{}: duplicate anomaly signal", tx.id()));
                }
            }
        }
    }
    ChainVerdict::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::AnomalyKind;

    fn chain(difficulty: u32) -> ChainState {
        ChainState::new(ChainConfig {
            difficulty,
            ..ChainConfig::default()
        })
        .unwrap()
    }

    fn register(name: &str) -> TxKind {
        TxKind::RegisterFiles {
            entries: vec![(name.into(), ContentHash::of(name.as_bytes()))],
            policy: AccessPolicy::open(10),
        }
    }

    fn signal(name: &str, window: u64) -> TxKind {
        TxKind::AnomalySignal {
            unit_id: 3,
            summary: SignalSummary {
                file_name: name.into(),
                window_index: window,
                kind: AnomalyKind::Undervoltage,
                rms_value: 0.0,
                detected_at_us: 1,
            },
        }
    }

    #[test]
    fn submit_grows_pool() {
        let mut c = chain(0);
        let id = c.submit_tx(1, register("u1_f0.csv")).unwrap();
        assert_eq!(c.pending().len(), 1);
        assert_eq!(id, TxId { sender: 1, nonce: 0 });
        assert_eq!(c.pending()[0].gas_used, 133_357);
    }

    #[test]
    fn zero_balance_rejected() {
        let mut c = ChainState::new(ChainConfig {
            difficulty: 0,
            initial_balance: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            c.submit_tx(0, register("a")),
            Err(LedgerError::InsufficientBalance { .. })
        ));
    }

    #[test]
    fn pending_gas_is_reserved() {
        let mut c = ChainState::new(ChainConfig {
            difficulty: 0,
            initial_balance: 200_000,
            ..Default::default()
        })
        .unwrap();
        c.submit_tx(0, register("a")).unwrap();
        assert!(matches!(
            c.submit_tx(0, register("b")),
            Err(LedgerError::InsufficientBalance { .. })
        ));
    }

    #[test]
    fn first_writer_wins() {
        let mut c = chain(0);
        c.submit_tx(1, register("x")).unwrap();
        assert!(matches!(
            c.submit_tx(2, register("x")),
            Err(LedgerError::NameTaken { owner: 1, .. })
        ));
        c.mine_block().unwrap();
        assert!(matches!(
            c.submit_tx(2, register("x")),
            Err(LedgerError::NameTaken { owner: 1, .. })
        ));
        // The owner may re-register.
        assert!(c.submit_tx(1, register("x")).is_ok());
    }

    #[test]
    fn mining_includes_all_pending_in_order() {
        let mut c = chain(4);
        let ids: Vec<_> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, n)| c.submit_tx(i as u16, register(n)).unwrap())
            .collect();
        let b = c.mine_block().unwrap().clone();
        assert_eq!(b.transactions.iter().map(|t| t.id()).collect::<Vec<_>>(), ids);
        assert!(c.pending().is_empty());
        assert_eq!(c.height(), 2);
        assert_eq!(c.balance(0), Some(DEFAULT_INITIAL_BALANCE - 133_357));
        assert!(c.verify_chain().is_ok());
    }

    #[test]
    fn empty_pool_is_signalled() {
        assert_eq!(chain(0).mine_block().unwrap_err(), LedgerError::EmptyPool);
    }

    #[test]
    fn difficulty_eight_gives_zero_first_byte() {
        let mut c = chain(8);
        c.submit_tx(0, register("a")).unwrap();
        assert_eq!(c.mine_block().unwrap().block_hash[0], 0);
    }

    #[test]
    fn genesis_only_chain_verifies() {
        assert!(chain(DEFAULT_DIFFICULTY).verify_chain().is_ok());
    }

    #[test]
    fn byte_flip_in_block_two_tx_detected() {
        let mut c = chain(4);
        for i in 0..3 {
            c.submit_tx(0, register(&format!("f{i}"))).unwrap();
            c.mine_block().unwrap();
        }
        let mut blocks = c.blocks().to_vec();
        let mut bytes = blocks[2].transactions[0].encode();
        // Flip a byte inside the file name.
        bytes[25] ^= 0x01;
        blocks[2].transactions[0] = Transaction::decode(&bytes).unwrap();
        assert!(matches!(
            verify_blocks(&blocks, c.config()),
            ChainVerdict::Invalid { index: 2, .. }
        ));
    }

    #[test]
    fn forged_gas_detected() {
        let mut c = chain(0);
        c.submit_tx(0, register("a")).unwrap();
        c.mine_block().unwrap();
        let mut blocks = c.blocks().to_vec();
        let b = &mut blocks[1];
        b.transactions[0].gas_used -= 1;
        // Re-seal so only the gas check can fail.
        *b = Block::mine(b.index, b.prev_hash, b.timestamp_ms, b.transactions.clone(), 0);
        match verify_blocks(&blocks, c.config()) {
            ChainVerdict::Invalid { index: 1, reason } => assert!(reason.contains("gas")),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn registry_reads_are_free_and_see_only_mined() {
        let mut c = chain(0);
        c.submit_tx(3, register("u3_f1.csv")).unwrap();
        assert!(c.query_registry(&RegistryQuery::FileName("u3_f1.csv".into())).is_empty());
        c.mine_block().unwrap();
        let before = c.total_balance();
        let hits = c.query_registry(&RegistryQuery::FileName("u3_f1.csv".into()));
        assert_eq!(hits[0].hash, ContentHash::of(b"u3_f1.csv"));
        assert_eq!(c.query_registry(&RegistryQuery::Sender(3)).len(), 1);
        assert_eq!(c.query_registry(&RegistryQuery::All).len(), 1);
        assert_eq!(c.total_balance(), before);
    }

    #[test]
    fn access_rules() {
        let mut c = chain(0);
        let reg = |name: &str, policy| TxKind::RegisterFiles {
            entries: vec![(name.into(), ContentHash::of(name.as_bytes()))],
            policy,
        };
        c.submit_tx(0, reg("open", AccessPolicy::open(10))).unwrap();
        c.submit_tx(0, reg("closed", canonicalize_policy([], 10).unwrap())).unwrap();
        c.submit_tx(0, reg("pair", canonicalize_policy([2, 5], 10).unwrap())).unwrap();
        c.mine_block().unwrap();
        assert!((0..10).all(|p| c.can_access(p, "open").unwrap()));
        assert!(c.can_access(0, "closed").unwrap());
        assert!((1..10).all(|p| !c.can_access(p, "closed").unwrap()));
        assert!(c.can_access(5, "pair").unwrap());
        assert!(!c.can_access(7, "pair").unwrap());
        assert!(matches!(c.can_access(1, "nope"), Err(LedgerError::Unregistered(_))));
    }

    #[test]
    fn signals_deduplicated() {
        let mut c = chain(0);
        let first = c.submit_tx(1, signal("u3_f9.csv", 9)).unwrap();
        assert_eq!(
            c.submit_tx(2, signal("u3_f9.csv", 9)),
            Err(LedgerError::DuplicateSignal(first))
        );
        c.mine_block().unwrap();
        assert_eq!(
            c.submit_tx(2, signal("u3_f9.csv", 9)),
            Err(LedgerError::DuplicateSignal(first))
        );
        assert!(c.submit_tx(2, signal("u3_f9.csv", 8)).is_ok());
        assert_eq!(c.signals_since(0).len(), 1);
        assert_eq!(c.signals_since(2).len(), 0);
    }

    #[test]
    fn registry_matches_replay() {
        let mut c = chain(2);
        for i in 0..5u16 {
            c.submit_tx(i, register(&format!("u{i}_f0.csv"))).unwrap();
            if i % 2 == 0 {
                c.mine_block().unwrap();
            }
        }
        c.mine_if_pending();
        let replayed = replay_registry(c.blocks());
        assert_eq!(replayed.len(), 5);
        assert_eq!(replayed.into_values().collect::<Vec<_>>(), c.query_registry(&RegistryQuery::All));
    }

    #[test]
    fn foreign_network_size_rejected() {
        let mut c = chain(0);
        let kind = TxKind::RegisterFiles {
            entries: vec![("a".into(), ContentHash::of(b"a"))],
            policy: AccessPolicy::open(12),
        };
        assert!(matches!(c.submit_tx(0, kind), Err(LedgerError::InvalidPayload(_))));
    }
}
