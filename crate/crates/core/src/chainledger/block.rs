use sha2::{Digest, Sha256};

use super::codec::{Reader, Writer};
use super::tx::Transaction;
use super::LedgerError;

pub type BlockHash = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: BlockHash,
    pub timestamp_ms: u64,
    pub transactions: Vec<Transaction>,
    pub nonce: u64,
    pub block_hash: BlockHash,
}

pub fn leading_zero_bits(hash: &BlockHash) -> u32 {
    let mut bits = 0;
    for &b in hash {
        if b == 0 {
            bits += 8;
        } else {
            bits += b.leading_zeros();
            break;
        }
    }
    bits
}

pub fn meets_difficulty(hash: &BlockHash, difficulty: u32) -> bool {
    leading_zero_bits(hash) >= difficulty
}

fn header_prefix(
    index: u64,
    prev_hash: &BlockHash,
    timestamp_ms: u64,
    transactions: &[Transaction],
) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(index)
        .raw(prev_hash)
        .u64(timestamp_ms)
        .u32(transactions.len() as u32);
    for tx in transactions {
        let bytes = tx.encode();
        w.u32(bytes.len() as u32).raw(&bytes);
    }
    w.finish()
}

impl Block {
    /// Searches nonces from zero until the hash has `difficulty` leading zero bits.
    pub fn mine(
        index: u64,
        prev_hash: BlockHash,
        timestamp_ms: u64,
        transactions: Vec<Transaction>,
        difficulty: u32,
    ) -> Self {
        let prefix = header_prefix(index, &prev_hash, timestamp_ms, &transactions);
        let mut base = Sha256::new();
        base.update(&prefix);
        let mut nonce = 0u64;
        let block_hash = loop {
            let hash: BlockHash = base.clone().chain_update(nonce.to_be_bytes()).finalize().into();
            if meets_difficulty(&hash, difficulty) {
                break hash;
            }
            nonce += 1;
        };
        Self {
            index,
            prev_hash,
            timestamp_ms,
            transactions,
            nonce,
            block_hash,
        }
    }

    /// Bytes hashed to produce `block_hash`.
    pub fn preimage(&self) -> Vec<u8> {
        let mut bytes = header_prefix(
            self.index,
            &self.prev_hash,
            self.timestamp_ms,
            &self.transactions,
        );
        bytes.extend_from_slice(&self.nonce.to_be_bytes());
        bytes
    }

    pub fn compute_hash(&self) -> BlockHash {
        Sha256::digest(self.preimage()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = self.preimage();
        bytes.extend_from_slice(&self.block_hash);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        let index = r.u64()?;
        let prev_hash = r.array32()?;
        let timestamp_ms = r.u64()?;
        let count = r.u32()?;
        let mut transactions = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let tx_bytes = r.take(len)?;
            transactions.push(Transaction::decode(tx_bytes)?);
        }
        let nonce = r.u64()?;
        let block_hash = r.array32()?;
        r.finish()?;
        Ok(Self {
            index,
            prev_hash,
            timestamp_ms,
            transactions,
            nonce,
            block_hash,
        })
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.block_hash)
    }
}
