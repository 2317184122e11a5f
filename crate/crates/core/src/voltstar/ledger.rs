//! Per-TU record of generated and acknowledged files.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, SystemTime};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransferLedgerError {
    #[error("file {0} was never generated")]
    NotGenerated(String),
    #[error("file {0} already generated")]
    AlreadyGenerated(String),
    #[error("file {0} already acknowledged")]
    AlreadySent(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedEntry {
    pub rows: usize,
    pub bytes: usize,
    pub created_at: SystemTime,
}

impl GeneratedEntry {
    pub fn now(rows: usize, bytes: usize) -> Self {
        Self {
            rows,
            bytes,
            created_at: SystemTime::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Acked,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentEntry {
    pub outcome: SendOutcome,
    pub sent_at: SystemTime,
    /// From the start of the successful write until the ACK arrived.
    pub transfer_time: Duration,
    /// Failed attempts before the one that produced `outcome`.
    pub retries: u32,
}

#[derive(Debug, Default)]
struct Inner {
    generated: BTreeMap<String, GeneratedEntry>,
    sent: BTreeMap<String, SentEntry>,
}

/// Every sent name is also generated; a name is sent at most once.
#[derive(Debug, Default)]
pub struct TransferLedger {
    inner: Mutex<Inner>,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_generated(&self, name: &str, entry: GeneratedEntry) -> Result<(), TransferLedgerError> {
        let mut g = self.inner.lock().unwrap();
        if g.generated.contains_key(name) {
            return Err(TransferLedgerError::AlreadyGenerated(name.into()));
        }
        g.generated.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn record_sent(&self, name: &str, entry: SentEntry) -> Result<(), TransferLedgerError> {
        let mut g = self.inner.lock().unwrap();
        if !g.generated.contains_key(name) {
            return Err(TransferLedgerError::NotGenerated(name.into()));
        }
        if g.sent.contains_key(name) {
            return Err(TransferLedgerError::AlreadySent(name.into()));
        }
        g.sent.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn generated_count(&self) -> usize {
        self.inner.lock().unwrap().generated.len()
    }

    pub fn sent_count(&self) -> usize {
        self.inner.lock().unwrap().sent.len()
    }

    pub fn acked_count(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .sent
            .values()
            .filter(|e| e.outcome == SendOutcome::Acked)
            .count()
    }

    pub fn is_sent(&self, name: &str) -> bool {
        self.inner.lock().unwrap().sent.contains_key(name)
    }

    pub fn sent(&self, name: &str) -> Option<SentEntry> {
        self.inner.lock().unwrap().sent.get(name).cloned()
    }

    /// Names generated but not yet sent, in name order.
    pub fn backlog(&self) -> Vec<String> {
        let g = self.inner.lock().unwrap();
        g.generated
            .keys()
            .filter(|k| !g.sent.contains_key(*k))
            .cloned()
            .collect()
    }

    pub fn transfer_times(&self) -> Vec<Duration> {
        self.inner
            .lock()
            .unwrap()
            .sent
            .values()
            .filter(|e| e.outcome == SendOutcome::Acked)
            .map(|e| e.transfer_time)
            .collect()
    }

    pub fn invariant_holds(&self) -> bool {
        let g = self.inner.lock().unwrap();
        g.sent.keys().all(|k| g.generated.contains_key(k))
    }
}
