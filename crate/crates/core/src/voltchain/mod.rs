//! Decentralised mode: Processing Units (PUs) put files in the content store
//! and register their hashes on the ledger. A rotating Active PU fetches every
//! new registration, analyses it and signals anomalies as transactions that
//! all PUs observe by polling the chain.

mod pu;
mod rotation;

use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pu::{ProcessingUnit, PuSettings, ScanCursor, ScanStats, UploadTiming};
pub use rotation::{rotate_roles, PuRole, RotationSchedule};

use crate::castore::{PeerId, StoreError, StoreNetwork};
use crate::chainledger::{canonicalize_policy, AccessPolicy, ChainConfig, ChainState, LedgerError, TxId};
use crate::detector::{AnomalyReport, DetectorConfig};
use crate::voltstar::FileFault;
use crate::waveform::{SampleStream, WaveformConfig, WaveformError};

#[derive(Debug, Error)]
pub enum VoltChainError {
    #[error("peer {peer} is {role:?}; only an Active PU may do this")]
    RoleViolation { peer: PeerId, role: PuRole },
    #[error("peer {0} is halted")]
    Halted(PeerId),
    #[error("upload batch is empty")]
    EmptyBatch,
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// A file-relative fault injected into one peer's sample source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeerFault {
    pub peer: PeerId,
    #[serde(flatten)]
    pub fault: FileFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoltChainConfig {
    pub peers: u16,
    pub hashes_per_tx: usize,
    pub rows_per_file: usize,
    pub replication: usize,
    pub slot_duration: u64,
    pub active_count: usize,
    pub network_latency_ms: u64,
    /// Peers allowed to read each upload; `None` lets everyone read.
    pub allowed_readers: Option<Vec<PeerId>>,
    pub chain: ChainConfig,
    pub waveform: WaveformConfig,
    pub detector: DetectorConfig,
    pub faults: Vec<PeerFault>,
}

impl Default for VoltChainConfig {
    fn default() -> Self {
        Self {
            peers: 10,
            hashes_per_tx: 1,
            rows_per_file: 2000,
            replication: 1,
            slot_duration: 1,
            active_count: 1,
            network_latency_ms: 0,
            allowed_readers: None,
            chain: ChainConfig::default(),
            waveform: WaveformConfig::default(),
            detector: DetectorConfig::default(),
            faults: Vec::new(),
        }
    }
}

impl VoltChainConfig {
    pub fn policy(&self) -> Result<AccessPolicy, VoltChainError> {
        match &self.allowed_readers {
            None => Ok(AccessPolicy::open(self.peers)),
            Some(ids) => Ok(canonicalize_policy(ids.iter().copied(), self.peers)?),
        }
    }

    pub fn validate(&self) -> Result<(), VoltChainError> {
        let bad = |m: &str| Err(VoltChainError::InvalidConfig(m.into()));
        if self.peers == 0 {
            return bad("peers must be positive");
        }
        if self.hashes_per_tx == 0 {
            return bad("hashes_per_tx must be at least 1");
        }
        if self.rows_per_file == 0 {
            return bad("rows_per_file must be positive");
        }
        if self.chain.network_size != self.peers {
            return bad("chain.network_size must equal peers");
        }
        for f in &self.faults {
            if f.peer >= self.peers {
                return bad("fault targets an unknown peer");
            }
            if f.fault.fault.end() > self.rows_per_file as u64 {
                return bad("fault extends past the end of its file");
            }
            f.fault.fault.validate()?;
        }
        self.waveform.validate()?;
        self.detector
            .validate()
            .map_err(|e| VoltChainError::InvalidConfig(e.to_string()))?;
        self.policy()?;
        RotationSchedule::round_robin(self.peers, self.slot_duration, self.active_count)?;
        Ok(())
    }

    fn source_for(&self, peer: PeerId) -> Result<SampleStream, VoltChainError> {
        let rows = self.rows_per_file as u64;
        let faults: Vec<_> = self
            .faults
            .iter()
            .filter(|f| f.peer == peer)
            .map(|f| f.fault.fault.shifted(u64::from(f.fault.file_index) * rows))
            .collect();
        let wf = self.waveform.clone().with_seed(self.waveform.seed.wrapping_add(u64::from(peer)));
        Ok(SampleStream::new(wf, &faults)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanRound {
    pub reports: Vec<AnomalyReport>,
    pub signals: Vec<TxId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub tick: u64,
    pub actives: Vec<PeerId>,
    pub files_uploaded: usize,
    pub transactions: usize,
    pub scan: ScanRound,
    pub observations: usize,
}

/// All PUs of one network sharing a chain and a store network.
pub struct VoltChainSim {
    config: VoltChainConfig,
    chain: Arc<RwLock<ChainState>>,
    network: Arc<StoreNetwork>,
    schedule: RotationSchedule,
    pus: Vec<ProcessingUnit>,
    tick: u64,
}

impl VoltChainSim {
    pub fn new(mut config: VoltChainConfig) -> Result<Self, VoltChainError> {
        config.chain.network_size = config.peers;
        config.validate()?;
        let chain = Arc::new(RwLock::new(ChainState::new(config.chain.clone())?));
        let network = Arc::new(StoreNetwork::with_peers(config.peers));
        let cursor: ScanCursor = Arc::new(Mutex::new(0));
        let settings = PuSettings {
            detector: config.detector.clone(),
            replication: config.replication,
            network_latency: Duration::from_millis(config.network_latency_ms),
            policy: config.policy()?,
            rows_per_file: config.rows_per_file,
        };
        let pus = (0..config.peers)
            .map(|p| {
                ProcessingUnit::new(
                    p,
                    Arc::clone(&network),
                    Arc::clone(&chain),
                    Arc::clone(&cursor),
                    settings.clone(),
                    config.source_for(p)?,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let schedule = RotationSchedule::round_robin(config.peers, config.slot_duration, config.active_count)?;
        let mut sim = Self {
            config,
            chain,
            network,
            schedule,
            pus,
            tick: 0,
        };
        sim.apply_roles();
        Ok(sim)
    }

    pub fn config(&self) -> &VoltChainConfig {
        &self.config
    }

    pub fn chain(&self) -> &Arc<RwLock<ChainState>> {
        &self.chain
    }

    pub fn network(&self) -> &Arc<StoreNetwork> {
        &self.network
    }

    pub fn schedule(&self) -> &RotationSchedule {
        &self.schedule
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn pus(&self) -> &[ProcessingUnit] {
        &self.pus
    }

    pub fn pu(&self, peer: PeerId) -> Result<&ProcessingUnit, VoltChainError> {
        self.pus.get(usize::from(peer)).ok_or(VoltChainError::UnknownPeer(peer))
    }

    pub fn pu_mut(&mut self, peer: PeerId) -> Result<&mut ProcessingUnit, VoltChainError> {
        self.pus.get_mut(usize::from(peer)).ok_or(VoltChainError::UnknownPeer(peer))
    }

    /// Active peers after substituting halted ones.
    pub fn actives(&self) -> Vec<PeerId> {
        self.schedule
            .live_actives(self.tick, |p| self.pus.get(usize::from(p)).is_some_and(|u| !u.is_halted()))
    }

    fn apply_roles(&mut self) {
        let actives = self.actives();
        for pu in &mut self.pus {
            let role = if actives.contains(&pu.peer_id()) { PuRole::Active } else { PuRole::Dormant };
            pu.set_role(role);
        }
    }

    pub fn set_tick(&mut self, tick: u64) {
        self.tick = tick;
        self.apply_roles();
    }

    pub fn advance(&mut self, ticks: u64) {
        self.set_tick(self.tick + ticks);
    }

    pub fn halt(&mut self, peer: PeerId) -> Result<(), VoltChainError> {
        self.pu_mut(peer)?.halt();
        self.apply_roles();
        Ok(())
    }

    pub fn resume(&mut self, peer: PeerId) -> Result<(), VoltChainError> {
        self.pu_mut(peer)?.resume();
        self.apply_roles();
        Ok(())
    }

    /// Every live PU generates and uploads `files_per_pu` files, concurrently.
    /// Returns (files uploaded, transactions submitted).
    pub fn upload_round(&mut self, files_per_pu: usize) -> Result<(usize, usize), VoltChainError> {
        let hashes_per_tx = self.config.hashes_per_tx;
        let results: Vec<Result<(usize, usize), VoltChainError>> = thread::scope(|s| {
            let handles: Vec<_> = self
                .pus
                .iter_mut()
                .filter(|p| !p.is_halted())
                .map(|pu| {
                    s.spawn(move || {
                        let batch = pu.next_files(files_per_pu);
                        let ids = pu.upload_cycle(&batch, hashes_per_tx)?;
                        Ok((batch.len(), ids.len()))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("upload thread panicked")).collect()
        });
        let mut totals = (0, 0);
        for r in results {
            let (f, t) = r?;
            totals.0 += f;
            totals.1 += t;
        }
        Ok(totals)
    }

    /// Every live PU uploads its own prepared files concurrently, one file per
    /// upload. `files[p]` belongs to peer `p`; halted peers must have none.
    /// Returns each peer's per-file timings in upload order.
    pub fn upload_timed_round(
        &mut self,
        files: &[Vec<(String, Vec<u8>)>],
    ) -> Result<Vec<Vec<UploadTiming>>, VoltChainError> {
        if files.len() != self.pus.len() {
            return Err(VoltChainError::InvalidConfig(format!(
                "expected files for {} peers, got {}",
                self.pus.len(),
                files.len()
            )));
        }
        let hashes_per_tx = self.config.hashes_per_tx;
        let results: Vec<Result<Vec<UploadTiming>, VoltChainError>> = thread::scope(|s| {
            let handles: Vec<_> = self
                .pus
                .iter_mut()
                .zip(files)
                .filter(|(_, f)| !f.is_empty())
                .map(|(pu, own)| {
                    s.spawn(move || {
                        own.iter()
                            .map(|f| pu.upload_timed(std::slice::from_ref(f), hashes_per_tx).map(|(_, t)| t))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("upload thread panicked")).collect()
        });
        let mut out = vec![Vec::new(); self.pus.len()];
        let mut it = results.into_iter();
        for (p, f) in files.iter().enumerate() {
            if !f.is_empty() {
                out[p] = it.next().expect("one result per uploading peer")?;
            }
        }
        Ok(out)
    }

    /// Each Active PU scans new registrations and signals what it finds.
    pub fn scan_round(&mut self) -> Result<ScanRound, VoltChainError> {
        let actives = self.actives();
        let mut round = ScanRound::default();
        for peer in actives {
            let pu = self.pu_mut(peer)?;
            let reports = pu.active_scan()?;
            for r in &reports {
                round.signals.push(pu.signal_anomaly(r)?);
            }
            round.reports.extend(reports);
        }
        Ok(round)
    }

    /// Every live PU polls the ledger; returns the number of new observations.
    pub fn poll_round(&mut self) -> Result<usize, VoltChainError> {
        let mut n = 0;
        for pu in self.pus.iter_mut().filter(|p| !p.is_halted()) {
            n += pu.poll_signals()?.len();
        }
        Ok(n)
    }

    /// Upload, scan and poll, then move to the next tick.
    pub fn step(&mut self, files_per_pu: usize) -> Result<StepReport, VoltChainError> {
        let tick = self.tick;
        let actives = self.actives();
        let (files_uploaded, transactions) = if files_per_pu > 0 {
            self.upload_round(files_per_pu)?
        } else {
            (0, 0)
        };
        let scan = self.scan_round()?;
        let observations = self.poll_round()?;
        self.advance(1);
        Ok(StepReport {
            tick,
            actives,
            files_uploaded,
            transactions,
            scan,
            observations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::FaultSpec;

    fn small(peers: u16) -> VoltChainConfig {
        VoltChainConfig {
            peers,
            rows_per_file: 2000,
            chain: ChainConfig {
                difficulty: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn outage_at(peer: PeerId, file_index: u32) -> PeerFault {
        PeerFault {
            peer,
            fault: FileFault {
                file_index,
                fault: FaultSpec::outage(0, 2000),
            },
        }
    }

    #[test]
    fn ten_files_one_tx_each_vs_one_batched_tx() {
        let mut sim = VoltChainSim::new(small(2)).unwrap();
        let pu = sim.pu_mut(0).unwrap();
        let batch = pu.next_files(10);
        let before = pu_balance(&sim, 0);
        let ids = sim.pu_mut(0).unwrap().upload_cycle(&batch, 1).unwrap();
        assert_eq!(ids.len(), 10);
        let single_gas = before - pu_balance(&sim, 0);

        let pu = sim.pu_mut(1).unwrap();
        let batch = pu.next_files(10);
        let before = pu_balance(&sim, 1);
        let ids = sim.pu_mut(1).unwrap().upload_cycle(&batch, 10).unwrap();
        assert_eq!(ids.len(), 1);
        let batched_gas = before - pu_balance(&sim, 1);
        assert!(batched_gas < single_gas, "{batched_gas} vs {single_gas}");
        assert_eq!(sim.chain().read().unwrap().registry_len(), 20);
    }

    fn pu_balance(sim: &VoltChainSim, p: PeerId) -> u64 {
        sim.chain().read().unwrap().balance(p).unwrap()
    }

    #[test]
    fn empty_batch_rejected() {
        let mut sim = VoltChainSim::new(small(2)).unwrap();
        assert!(matches!(sim.pu_mut(0).unwrap().upload_cycle(&[], 1), Err(VoltChainError::EmptyBatch)));
    }

    #[test]
    fn uploaded_tracks_mined_registrations() {
        let mut sim = VoltChainSim::new(small(3)).unwrap();
        sim.upload_round(4).unwrap();
        for pu in sim.pus() {
            assert_eq!(pu.uploaded().len(), 4);
            assert!(pu.pending().is_empty());
            assert!(pu.uploaded_consistent());
        }
    }

    #[test]
    fn rejected_registration_stays_pending() {
        let mut cfg = small(2);
        cfg.chain.initial_balance = 10;
        let mut sim = VoltChainSim::new(cfg).unwrap();
        let pu = sim.pu_mut(0).unwrap();
        let batch = pu.next_files(2);
        let ids = pu.upload_cycle(&batch, 1).unwrap();
        assert!(ids.is_empty());
        assert_eq!(pu.pending().len(), 2);
        assert!(pu.uploaded().is_empty());
    }

    #[test]
    fn dormant_pu_cannot_scan_or_signal() {
        let mut sim = VoltChainSim::new(small(3)).unwrap();
        assert_eq!(sim.actives(), vec![0]);
        let pu = sim.pu_mut(1).unwrap();
        assert!(matches!(pu.active_scan(), Err(VoltChainError::RoleViolation { peer: 1, .. })));
        let report = AnomalyReport {
            unit_id: 1,
            file_name: "u1_f0.csv".into(),
            window_index: 0,
            rms_value: 0.0,
            kind: crate::detector::AnomalyKind::Undervoltage,
            detected_at_us: 0,
        };
        assert!(matches!(pu.signal_anomaly(&report), Err(VoltChainError::RoleViolation { .. })));
    }

    #[test]
    fn clean_network_scans_everything_without_reports() {
        let mut sim = VoltChainSim::new(small(10)).unwrap();
        sim.upload_round(10).unwrap();
        let round = sim.scan_round().unwrap();
        assert!(round.reports.is_empty());
        assert_eq!(sim.pu(0).unwrap().scan_stats().fetched, 100);
    }

    #[test]
    fn one_outage_one_signal_seen_by_all() {
        let mut cfg = small(10);
        cfg.faults.push(outage_at(6, 2));
        let mut sim = VoltChainSim::new(cfg).unwrap();
        let mut all_reports = Vec::new();
        for _ in 0..4 {
            let step = sim.step(1).unwrap();
            all_reports.extend(step.scan.reports);
        }
        assert_eq!(all_reports.len(), 1);
        assert_eq!(all_reports[0].file_name, "u6_f2.csv");
        assert_eq!(all_reports[0].unit_id, 6);
        for pu in sim.pus() {
            assert_eq!(pu.observed_signals().len(), 1, "peer {}", pu.peer_id());
            assert_eq!(pu.observed_signals()[0].summary.file_name, "u6_f2.csv");
        }
    }

    #[test]
    fn duplicate_signal_returns_existing_id() {
        let mut cfg = small(3);
        cfg.faults.push(outage_at(1, 0));
        let mut sim = VoltChainSim::new(cfg).unwrap();
        sim.upload_round(1).unwrap();
        let pu = sim.pu_mut(0).unwrap();
        let reports = pu.active_scan().unwrap();
        assert_eq!(reports.len(), 1);
        let a = pu.signal_anomaly(&reports[0]).unwrap();
        let b = pu.signal_anomaly(&reports[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(sim.chain().read().unwrap().signals_since(0).len(), 1);
    }

    #[test]
    fn denied_files_are_skipped_and_counted() {
        let mut cfg = small(4);
        cfg.allowed_readers = Some(vec![2]);
        let mut sim = VoltChainSim::new(cfg).unwrap();
        sim.upload_round(1).unwrap();
        sim.pu_mut(0).unwrap().active_scan().unwrap();
        let s = sim.pu(0).unwrap().scan_stats();
        // Peer 0 reads its own file; the other three deny it.
        assert_eq!((s.fetched, s.denied), (1, 3));
    }

    #[test]
    fn corrupted_copy_detected_not_analysed() {
        let mut cfg = small(3);
        cfg.replication = 0;
        cfg.faults.push(outage_at(2, 0));
        let mut sim = VoltChainSim::new(cfg).unwrap();
        sim.upload_round(1).unwrap();
        let hash = *sim.pu(2).unwrap().uploaded().values().next().unwrap();
        sim.pu(2).unwrap().store().tamper(&hash, |b| b[40] ^= 1);
        let reports = sim.pu_mut(0).unwrap().active_scan().unwrap();
        assert!(reports.is_empty());
        let s = sim.pu(0).unwrap().scan_stats();
        assert_eq!((s.fetched, s.integrity_failures), (2, 1));
    }

    #[test]
    fn scan_cursor_is_shared_across_rotation() {
        let mut sim = VoltChainSim::new(small(3)).unwrap();
        sim.upload_round(2).unwrap();
        sim.scan_round().unwrap();
        sim.advance(1);
        assert_eq!(sim.actives(), vec![1]);
        sim.scan_round().unwrap();
        assert_eq!(sim.pu(1).unwrap().scan_stats().fetched, 0);
        assert_eq!(sim.pu(0).unwrap().scan_stats().fetched, 6);
    }

    #[test]
    fn halted_active_is_replaced() {
        let mut sim = VoltChainSim::new(small(4)).unwrap();
        sim.halt(0).unwrap();
        assert_eq!(sim.actives(), vec![1]);
        assert!(matches!(sim.pu_mut(0).unwrap().poll_signals(), Err(VoltChainError::Halted(0))));
    }
}
