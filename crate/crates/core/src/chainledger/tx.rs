use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::codec::{Reader, Writer};
use super::policy::{AccessPolicy, PolicyMode};
use super::LedgerError;
use crate::castore::{ContentHash, PeerId};
use crate::detector::{AnomalyKind, AnomalyReport};

/// Transactions are identified by `(sender, nonce)`, unique because nonces
/// strictly increase per sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TxId {
    pub sender: PeerId,
    pub nonce: u64,
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx-{}-{}", self.sender, self.nonce)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSummary {
    pub file_name: String,
    pub window_index: u64,
    pub kind: AnomalyKind,
    pub rms_value: f64,
    pub detected_at_us: u64,
}

impl SignalSummary {
    pub fn dedup_key(&self) -> (&str, u64) {
        (&self.file_name, self.window_index)
    }
}

impl From<&AnomalyReport> for SignalSummary {
    fn from(r: &AnomalyReport) -> Self {
        Self {
            file_name: r.file_name.clone(),
            window_index: r.window_index,
            kind: r.kind,
            rms_value: r.rms_value,
            detected_at_us: r.detected_at_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TxKind {
    RegisterFiles {
        entries: Vec<(String, ContentHash)>,
        policy: AccessPolicy,
    },
    AnomalySignal {
        unit_id: u16,
        summary: SignalSummary,
    },
}

const TAG_REGISTER: u8 = 1;
const TAG_SIGNAL: u8 = 2;

impl TxKind {
    pub fn validate(&self) -> Result<(), LedgerError> {
        let check_name = |n: &str| {
            if n.is_empty() || n.len() > usize::from(u16::MAX) {
                Err(LedgerError::InvalidPayload(format!(
                    "file name length {} out of range",
                    n.len()
                )))
            } else {
                Ok(())
            }
        };
        match self {
            TxKind::RegisterFiles { entries, policy } => {
                if entries.is_empty() {
                    return Err(LedgerError::InvalidPayload("no entries".into()));
                }
                let mut seen = BTreeSet::new();
                for (name, _) in entries {
                    check_name(name)?;
                    if !seen.insert(name.as_str()) {
                        return Err(LedgerError::InvalidPayload(format!("duplicate name {name}")));
                    }
                }
                if !policy.is_canonical() {
                    return Err(LedgerError::InvalidPayload("policy not canonical".into()));
                }
                Ok(())
            }
            TxKind::AnomalySignal { summary, .. } => check_name(&summary.file_name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: PeerId,
    pub nonce: u64,
    pub gas_used: u64,
    pub kind: TxKind,
}

impl Transaction {
    pub fn id(&self) -> TxId {
        TxId {
            sender: self.sender,
            nonce: self.nonce,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.sender).u64(self.nonce).u64(self.gas_used);
        match &self.kind {
            TxKind::RegisterFiles { entries, policy } => {
                w.u8(TAG_REGISTER).u32(entries.len() as u32);
                for (name, hash) in entries {
                    w.name(name).raw(hash.digest());
                }
                let mode = match policy.mode {
                    PolicyMode::AllowList => 0,
                    PolicyMode::DenyList => 1,
                };
                w.u8(mode).u16(policy.network_size).u32(policy.ids.len() as u32);
                for &id in &policy.ids {
                    w.u16(id);
                }
            }
            TxKind::AnomalySignal { unit_id, summary } => {
                w.u8(TAG_SIGNAL)
                    .u16(*unit_id)
                    .name(&summary.file_name)
                    .u64(summary.window_index)
                    .u8(summary.kind.as_u8())
                    .u64(summary.rms_value.to_bits())
                    .u64(summary.detected_at_us);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        let tx = Self::read(&mut r)?;
        r.finish()?;
        Ok(tx)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, LedgerError> {
        let sender = r.u16()?;
        let nonce = r.u64()?;
        let gas_used = r.u64()?;
        let kind = match r.u8()? {
            TAG_REGISTER => {
                let count = r.u32()?;
                let mut entries = Vec::new();
                for _ in 0..count {
                    let name = r.name()?;
                    entries.push((name, ContentHash::from_digest(r.array32()?)));
                }
                let mode = match r.u8()? {
                    0 => PolicyMode::AllowList,
                    1 => PolicyMode::DenyList,
                    m => return Err(LedgerError::Decode(format!("unknown policy mode {m}"))),
                };
                let network_size = r.u16()?;
                let id_count = r.u32()?;
                let mut ids = BTreeSet::new();
                let mut prev: Option<u16> = None;
                for _ in 0..id_count {
                    let id = r.u16()?;
                    if prev.is_some_and(|p| id <= p) {
                        return Err(LedgerError::Decode("policy ids not ascending".into()));
                    }
                    prev = Some(id);
                    ids.insert(id);
                }
                TxKind::RegisterFiles {
                    entries,
                    policy: AccessPolicy {
                        mode,
                        ids,
                        network_size,
                    },
                }
            }
            TAG_SIGNAL => {
                let unit_id = r.u16()?;
                let file_name = r.name()?;
                let window_index = r.u64()?;
                let kind = AnomalyKind::from_u8(r.u8()?)
                    .ok_or_else(|| LedgerError::Decode("unknown anomaly kind".into()))?;
                let rms_value = f64::from_bits(r.u64()?);
                let detected_at_us = r.u64()?;
                TxKind::AnomalySignal {
                    unit_id,
                    summary: SignalSummary {
                        file_name,
                        window_index,
                        kind,
                        rms_value,
                        detected_at_us,
                    },
                }
            }
            t => return Err(LedgerError::Decode(format!("unknown transaction tag {t}"))),
        };
        Ok(Self {
            sender,
            nonce,
            gas_used,
            kind,
        })
    }
}
