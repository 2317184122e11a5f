//! A Processing Unit: uploads its own files, and while Active scans every
//! newly registered file and signals anomalies through the ledger.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::rotation::PuRole;
use super::VoltChainError;
use crate::castore::{pin, ContentHash, PeerId, PeerStore, StoreError, StoreNetwork};
use crate::chainledger::{AccessPolicy, ChainState, LedgerError, SignalRecord, TxId, TxKind};
use crate::detector::{scan_file, AnomalyReport, DetectorConfig};
use crate::waveform::{read_csv, DataFile, SampleStream};

/// Block height below which every registration has already been scanned.
/// Shared by all PUs so a newly Active PU resumes where the last one stopped.
pub type ScanCursor = Arc<Mutex<u64>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub fetched: u64,
    pub denied: u64,
    pub fetch_failures: u64,
    pub integrity_failures: u64,
    pub malformed: u64,
}

impl std::ops::AddAssign for ScanStats {
    fn add_assign(&mut self, o: Self) {
        self.fetched += o.fetched;
        self.denied += o.denied;
        self.fetch_failures += o.fetch_failures;
        self.integrity_failures += o.integrity_failures;
        self.malformed += o.malformed;
    }
}

/// Wall time spent in each phase of an upload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UploadTiming {
    pub store_add: Duration,
    pub replicate: Duration,
    /// Waiting for other peers to release the ledger.
    pub lock_wait: Duration,
    pub submit: Duration,
    pub mine: Duration,
}

impl UploadTiming {
    pub fn total(&self) -> Duration {
        self.store_add + self.replicate + self.lock_wait + self.submit + self.mine
    }
}

/// Parameters a PU needs besides shared handles.
#[derive(Debug, Clone)]
pub struct PuSettings {
    pub detector: DetectorConfig,
    /// Ring neighbours that receive a pinned replica of each upload.
    pub replication: usize,
    /// Delay added to every transfer between two different peers.
    pub network_latency: Duration,
    pub policy: AccessPolicy,
    pub rows_per_file: usize,
}

pub struct ProcessingUnit {
    peer_id: PeerId,
    role: PuRole,
    halted: bool,
    store: Arc<PeerStore>,
    network: Arc<StoreNetwork>,
    chain: Arc<RwLock<ChainState>>,
    cursor: ScanCursor,
    settings: PuSettings,
    source: SampleStream,
    next_sequence: u32,
    uploaded: BTreeMap<String, ContentHash>,
    pending: BTreeMap<String, ContentHash>,
    signal_cursor: u64,
    observed: Vec<SignalRecord>,
    scan_stats: ScanStats,
}

impl ProcessingUnit {
    pub fn new(
        peer_id: PeerId,
        network: Arc<StoreNetwork>,
        chain: Arc<RwLock<ChainState>>,
        cursor: ScanCursor,
        settings: PuSettings,
        source: SampleStream,
    ) -> Result<Self, VoltChainError> {
        let store = network
            .peer(peer_id)
            .ok_or_else(|| VoltChainError::InvalidConfig(format!("no store for peer {peer_id}")))?;
        // Signals mined before this PU joined are not replayed to it.
        let signal_cursor = chain.read().unwrap().height();
        Ok(Self {
            peer_id,
            role: PuRole::Dormant,
            halted: false,
            store,
            network,
            chain,
            cursor,
            settings,
            source,
            next_sequence: 0,
            uploaded: BTreeMap::new(),
            pending: BTreeMap::new(),
            signal_cursor,
            observed: Vec::new(),
            scan_stats: ScanStats::default(),
        })
    }

    pub fn peer_id(&self) -> PeerId {
        self.peer_id
    }

    pub fn role(&self) -> PuRole {
        self.role
    }

    pub fn set_role(&mut self, role: PuRole) {
        self.role = role;
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Takes the PU and its store offline.
    pub fn halt(&mut self) {
        self.halted = true;
        self.role = PuRole::Dormant;
        self.store.set_online(false);
    }

    pub fn resume(&mut self) {
        self.halted = false;
        self.store.set_online(true);
    }

    pub fn store(&self) -> &Arc<PeerStore> {
        &self.store
    }

    pub fn uploaded(&self) -> &BTreeMap<String, ContentHash> {
        &self.uploaded
    }

    /// Files added locally whose registration has not been mined.
    pub fn pending(&self) -> &BTreeMap<String, ContentHash> {
        &self.pending
    }

    pub fn observed_signals(&self) -> &[SignalRecord] {
        &self.observed
    }

    pub fn scan_stats(&self) -> ScanStats {
        self.scan_stats
    }

    /// Pulls the next `count` files from this PU's sample source.
    pub fn next_files(&mut self, count: usize) -> Vec<DataFile> {
        let rows = self.settings.rows_per_file;
        (0..count)
            .map(|_| {
                let samples: Vec<_> = self.source.by_ref().take(rows).collect();
                let seq = self.next_sequence;
                self.next_sequence += 1;
                DataFile::new(self.peer_id, seq, samples).expect("rows_per_file is positive")
            })
            .collect()
    }

    fn check_live(&self) -> Result<(), VoltChainError> {
        if self.halted {
            Err(VoltChainError::Halted(self.peer_id))
        } else {
            Ok(())
        }
    }

    fn check_active(&self) -> Result<(), VoltChainError> {
        self.check_live()?;
        if self.role != PuRole::Active {
            return Err(VoltChainError::RoleViolation {
                peer: self.peer_id,
                role: self.role,
            });
        }
        Ok(())
    }

    fn delay(&self) {
        if !self.settings.network_latency.is_zero() {
            thread::sleep(self.settings.network_latency);
        }
    }

    /// Pins `hash` on the next `replication` live peers around the ring.
    fn replicate(&self, hash: &ContentHash) {
        let peers = self.network.peers();
        let n = peers.len();
        let Some(me) = peers.iter().position(|p| p.peer_id() == self.peer_id) else { return };
        let targets = (1..n)
            .map(|k| &peers[(me + k) % n])
            .filter(|p| p.is_online())
            .take(self.settings.replication);
        for target in targets {
            self.delay();
            if let Err(e) = pin(&self.store, target, hash) {
                warn!("peer {} could not replicate {hash} to {}: {e}", self.peer_id, target.peer_id());
            }
        }
    }

    /// Adds `batch` to the local store, registers the hashes in groups of
    /// `hashes_per_tx` and mines them. Files whose transaction is rejected
    /// stay pending.
    pub fn upload_cycle(&mut self, batch: &[DataFile], hashes_per_tx: usize) -> Result<Vec<TxId>, VoltChainError> {
        let csv: Vec<_> = batch.iter().map(|f| (f.name(), f.to_csv())).collect();
        self.upload_timed(&csv, hashes_per_tx).map(|(ids, _)| ids)
    }

    /// [`Self::upload_cycle`] over already-serialised files, timing each phase.
    pub fn upload_timed(
        &mut self,
        files: &[(String, Vec<u8>)],
        hashes_per_tx: usize,
    ) -> Result<(Vec<TxId>, UploadTiming), VoltChainError> {
        self.check_live()?;
        if files.is_empty() {
            return Err(VoltChainError::EmptyBatch);
        }
        if hashes_per_tx == 0 {
            return Err(VoltChainError::InvalidConfig("hashes_per_tx must be at least 1".into()));
        }
        let mut timing = UploadTiming::default();
        let mut entries = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let t = Instant::now();
            let hash = self.store.add(bytes)?;
            timing.store_add += t.elapsed();
            let t = Instant::now();
            self.replicate(&hash);
            timing.replicate += t.elapsed();
            self.pending.insert(name.clone(), hash);
            entries.push((name.clone(), hash));
        }
        let mut ids = Vec::new();
        {
            let t = Instant::now();
            let mut chain = self.chain.write().unwrap();
            timing.lock_wait += t.elapsed();
            let t = Instant::now();
            for group in entries.chunks(hashes_per_tx) {
                let kind = TxKind::RegisterFiles {
                    entries: group.to_vec(),
                    policy: self.settings.policy.clone(),
                };
                match chain.submit_tx(self.peer_id, kind) {
                    Ok(id) => ids.push(id),
                    Err(e) => warn!("peer {} registration rejected: {e}", self.peer_id),
                }
            }
            timing.submit += t.elapsed();
            let t = Instant::now();
            chain.mine_if_pending();
            timing.mine += t.elapsed();
        }
        self.settle();
        Ok((ids, timing))
    }

    /// Moves pending files whose registration is mined into `uploaded`.
    pub fn settle(&mut self) {
        let chain = self.chain.read().unwrap();
        let mut done = Vec::new();
        for (name, hash) in &self.pending {
            let mined = chain
                .query_registry(&crate::chainledger::RegistryQuery::FileName(name.clone()))
                .into_iter()
                .any(|e| e.sender == self.peer_id && e.hash == *hash);
            if mined {
                done.push(name.clone());
            }
        }
        drop(chain);
        for name in done {
            let hash = self.pending.remove(&name).expect("listed above");
            self.uploaded.insert(name, hash);
        }
    }

    /// Every uploaded file is registered to this PU under the same hash.
    pub fn uploaded_consistent(&self) -> bool {
        let chain = self.chain.read().unwrap();
        self.uploaded.iter().all(|(name, hash)| {
            chain
                .query_registry(&crate::chainledger::RegistryQuery::FileName(name.clone()))
                .first()
                .is_some_and(|e| e.sender == self.peer_id && e.hash == *hash)
        })
    }

    /// Scans registrations mined since the shared cursor.
    pub fn active_scan(&mut self) -> Result<Vec<AnomalyReport>, VoltChainError> {
        self.check_active()?;
        let (entries, from, to) = {
            let mut cursor = self.cursor.lock().unwrap();
            let chain = self.chain.read().unwrap();
            let from = *cursor;
            let to = chain.height();
            *cursor = to;
            let entries: Vec<_> = chain
                .registrations_since(from)
                .into_iter()
                .filter(|e| e.block_index < to)
                .collect();
            (entries, from, to)
        };
        let mut stats = ScanStats::default();
        let mut reports = Vec::new();
        for entry in entries {
            if entry.sender != self.peer_id && !entry.policy.permits(self.peer_id) {
                stats.denied += 1;
                continue;
            }
            if !self.store.contains(&entry.hash) {
                self.delay();
            }
            let bytes = match self.network.get_preferring(Some(self.peer_id), &entry.hash) {
                Ok(b) => b,
                Err(e) => {
                    warn!("peer {} cannot fetch {}: {e}", self.peer_id, entry.file_name);
                    match e {
                        StoreError::IntegrityFailure { .. } => stats.integrity_failures += 1,
                        _ => stats.fetch_failures += 1,
                    }
                    continue;
                }
            };
            if !entry.hash.verify(&bytes) {
                stats.integrity_failures += 1;
                continue;
            }
            stats.fetched += 1;
            let rows = match read_csv(&bytes) {
                Ok(r) => r,
                Err(e) => {
                    warn!("{} is not a valid CSV: {e}", entry.file_name);
                    stats.malformed += 1;
                    continue;
                }
            };
            reports.extend(scan_file(entry.sender, &entry.file_name, &rows, &self.settings.detector));
        }
        debug!("peer {} scanned blocks {from}..{to}: {stats:?}", self.peer_id);
        self.scan_stats += stats;
        Ok(reports)
    }

    /// Submits and mines an anomaly signal. A signal already on the ledger
    /// for the same file and window yields the existing transaction id.
    pub fn signal_anomaly(&mut self, report: &AnomalyReport) -> Result<TxId, VoltChainError> {
        self.check_active()?;
        let mut chain = self.chain.write().unwrap();
        let kind = TxKind::AnomalySignal {
            unit_id: report.unit_id,
            summary: report.into(),
        };
        match chain.submit_tx(self.peer_id, kind) {
            Ok(id) => {
                chain.mine_if_pending();
                info!(
                    "peer {} signalled {} window {} ({id})",
                    self.peer_id, report.file_name, report.window_index
                );
                Ok(id)
            }
            Err(LedgerError::DuplicateSignal(id)) => Ok(id),
            Err(e) => Err(e.into()),
        }
    }

    /// Reads signals mined since the last poll.
    pub fn poll_signals(&mut self) -> Result<Vec<SignalRecord>, VoltChainError> {
        self.check_live()?;
        let chain = self.chain.read().unwrap();
        let fresh = chain.signals_since(self.signal_cursor).to_vec();
        self.signal_cursor = chain.height();
        drop(chain);
        self.observed.extend(fresh.iter().cloned());
        Ok(fresh)
    }
}
