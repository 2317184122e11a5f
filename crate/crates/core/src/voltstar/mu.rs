//! Master Unit server.
//!
//! Threads: one acceptor per listener, one session per TU data connection, a
//! single detector worker fed by a FIFO queue (so reports from one TU keep
//! their order) and a single broadcaster.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufReader, BufWriter, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use super::crypto::{EncryptedBlob, Sealer, SymmetricKey};
use super::frame::{fault_frame, read_frame, write_frame, Ack, Frame, MsgType, DEFAULT_MAX_PAYLOAD};
use crate::detector::{scan_file, AnomalyReport, DetectorConfig};
use crate::waveform::{read_csv, VoltageSample};

/// Key id under which the MU re-encrypts files at rest.
pub const STORAGE_KEY_ID: u16 = u16::MAX;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const BROADCAST_WRITE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum MuError {
    #[error("invalid MU config: {0}")]
    InvalidConfig(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct MuConfig {
    pub data_addr: SocketAddr,
    pub broadcast_addr: SocketAddr,
    pub unit_keys: BTreeMap<u16, SymmetricKey>,
    pub storage_key: SymmetricKey,
    pub storage_dir: PathBuf,
    pub detector: DetectorConfig,
    pub max_payload: usize,
}

impl MuConfig {
    /// Loopback listeners on ephemeral ports.
    pub fn local(storage_dir: impl Into<PathBuf>, unit_keys: BTreeMap<u16, SymmetricKey>) -> Self {
        Self {
            data_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            broadcast_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            unit_keys,
            storage_key: SymmetricKey::generate(),
            storage_dir: storage_dir.into(),
            detector: DetectorConfig::default(),
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }

    pub fn validate(&self) -> Result<(), MuError> {
        // Port 0 asks the OS for distinct ephemeral ports.
        if self.data_addr.port() != 0 && self.data_addr.port() == self.broadcast_addr.port() {
            return Err(MuError::InvalidConfig("data and broadcast ports must differ".into()));
        }
        if self.unit_keys.contains_key(&STORAGE_KEY_ID) {
            return Err(MuError::InvalidConfig(format!("unit id {STORAGE_KEY_ID} is reserved")));
        }
        self.detector
            .validate()
            .map_err(|e| MuError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastFailure {
    pub unit_id: u16,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BroadcastOutcome {
    pub delivered: usize,
    pub failures: Vec<BroadcastFailure>,
}

#[derive(Debug, Clone)]
pub struct BroadcastRecord {
    pub report: AnomalyReport,
    pub outcome: BroadcastOutcome,
    /// From receipt of the file to the end of the broadcast.
    pub latency: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct MuStats {
    pub files_received: u64,
    pub files_persisted: u64,
    pub duplicates: u64,
    pub auth_failures: u64,
    pub malformed: u64,
    pub storage_errors: u64,
    pub broadcasts: Vec<BroadcastRecord>,
}

struct Job {
    unit_id: u16,
    name: String,
    rows: Vec<VoltageSample>,
    received: Instant,
}

struct Subscriber {
    unit_id: u16,
    stream: TcpStream,
}

struct Shared {
    config: MuConfig,
    storage: Sealer,
    stop: AtomicBool,
    stats: Mutex<MuStats>,
    subscribers: Mutex<Vec<Subscriber>>,
    sessions: Mutex<Vec<(TcpStream, JoinHandle<()>)>>,
    persisted: Mutex<HashSet<(u16, String)>>,
}

pub struct MuHandle {
    shared: Arc<Shared>,
    data_addr: SocketAddr,
    broadcast_addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

fn bind(addr: SocketAddr) -> Result<TcpListener, MuError> {
    TcpListener::bind(addr).map_err(|source| MuError::Bind { addr, source })
}

pub fn mu_serve(config: MuConfig) -> Result<MuHandle, MuError> {
    config.validate()?;
    fs::create_dir_all(&config.storage_dir)?;
    let data = bind(config.data_addr)?;
    let bcast = bind(config.broadcast_addr)?;
    let data_addr = data.local_addr()?;
    let broadcast_addr = bcast.local_addr()?;
    if data_addr == broadcast_addr {
        return Err(MuError::InvalidConfig("data and broadcast ports must differ".into()));
    }

    let shared = Arc::new(Shared {
        storage: Sealer::new(STORAGE_KEY_ID, &config.storage_key),
        config,
        stop: AtomicBool::new(false),
        stats: Mutex::new(MuStats::default()),
        subscribers: Mutex::new(Vec::new()),
        sessions: Mutex::new(Vec::new()),
        persisted: Mutex::new(HashSet::new()),
    });

    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let (report_tx, report_rx) = mpsc::channel::<(AnomalyReport, Instant)>();

    let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| {
        thread::Builder::new().name(name.into()).spawn(f).map_err(MuError::Io)
    };
    let threads = vec![
        spawn("mu-data-accept", {
            let shared = Arc::clone(&shared);
            Box::new(move || accept_data(shared, data, job_tx))
        })?,
        spawn("mu-bcast-accept", {
            let shared = Arc::clone(&shared);
            Box::new(move || accept_broadcast(shared, bcast))
        })?,
        spawn("mu-detector", {
            let shared = Arc::clone(&shared);
            Box::new(move || detector_worker(shared, job_rx, report_tx))
        })?,
        spawn("mu-broadcaster", {
            let shared = Arc::clone(&shared);
            Box::new(move || broadcaster(shared, report_rx))
        })?,
    ];
    info!("MU listening: data {data_addr}, broadcast {broadcast_addr}");
    Ok(MuHandle {
        shared,
        data_addr,
        broadcast_addr,
        threads,
    })
}

impl MuHandle {
    pub fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    pub fn broadcast_addr(&self) -> SocketAddr {
        self.broadcast_addr
    }

    pub fn storage_dir(&self) -> &Path {
        &self.shared.config.storage_dir
    }

    pub fn stats(&self) -> MuStats {
        self.shared.stats.lock().unwrap().clone()
    }

    pub fn registered_units(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.shared.subscribers.lock().unwrap().iter().map(|s| s.unit_id).collect();
        ids.sort_unstable();
        ids
    }

    /// Sends `report` to every registered TU right away, bypassing the queue.
    pub fn broadcast_fault(&self, report: &AnomalyReport) -> BroadcastOutcome {
        self.shared.broadcast_fault(report)
    }

    /// Path of the stored blob for a file.
    pub fn blob_path(&self, unit_id: u16, name: &str) -> PathBuf {
        blob_path(&self.shared.config.storage_dir, unit_id, name)
    }

    /// Decrypts a stored blob back to the CSV bytes.
    pub fn read_stored(&self, unit_id: u16, name: &str) -> io::Result<Vec<u8>> {
        let bytes = fs::read(self.blob_path(unit_id, name))?;
        EncryptedBlob::decode(&bytes)
            .and_then(|b| b.open(&self.shared.config.storage_key))
            .map_err(|e| io::Error::new(ErrorKind::InvalidData, e))
    }

    /// Stops all threads and closes every connection.
    pub fn stop(mut self) -> MuStats {
        self.shutdown();
        self.stats()
    }

    fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking acceptors.
        for addr in [self.data_addr, self.broadcast_addr] {
            let _ = TcpStream::connect_timeout(&wake_addr(addr), Duration::from_millis(500));
        }
        for s in self.shared.subscribers.lock().unwrap().drain(..) {
            let _ = s.stream.shutdown(Shutdown::Both);
        }
        let mut threads = std::mem::take(&mut self.threads).into_iter();
        // The data acceptor goes first so no session is added after the drain.
        if let Some(acceptor) = threads.next() {
            let _ = acceptor.join();
        }
        let sessions: Vec<_> = self.shared.sessions.lock().unwrap().drain(..).collect();
        for (stream, handle) in sessions {
            let _ = stream.shutdown(Shutdown::Both);
            let _ = handle.join();
        }
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for MuHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    if addr.ip().is_unspecified() {
        SocketAddr::from(([127, 0, 0, 1], addr.port()))
    } else {
        addr
    }
}

fn blob_path(dir: &Path, unit_id: u16, name: &str) -> PathBuf {
    dir.join(unit_id.to_string()).join(format!("{name}.enc"))
}

/// File names become path components, so they must not escape the unit dir.
fn is_safe_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\', '\0'])
}

impl Shared {
    fn stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn broadcast_fault(&self, report: &AnomalyReport) -> BroadcastOutcome {
        let bytes = fault_frame(report).encode().expect("fault frame within limits");
        let mut outcome = BroadcastOutcome::default();
        let mut subs = self.subscribers.lock().unwrap();
        subs.retain_mut(|s| match deliver(&mut s.stream, &bytes) {
            Ok(()) => {
                outcome.delivered += 1;
                true
            }
            Err(e) => {
                warn!("broadcast to unit {} failed: {e}", s.unit_id);
                outcome.failures.push(BroadcastFailure {
                    unit_id: s.unit_id,
                    error: e.to_string(),
                });
                let _ = s.stream.shutdown(Shutdown::Both);
                false
            }
        });
        outcome
    }

    fn handle_file(&self, frame: &Frame, jobs: &Sender<Job>) -> Ack {
        let received = Instant::now();
        if frame.msg_type != MsgType::File {
            return Ack::Error(format!("unexpected {:?} frame on data port", frame.msg_type));
        }
        self.stats.lock().unwrap().files_received += 1;
        let unit_id = frame.unit_id;
        if !is_safe_name(&frame.name) {
            self.stats.lock().unwrap().malformed += 1;
            return Ack::Error(format!("unsafe file name {:?}", frame.name));
        }
        let plaintext = match self.decrypt(frame) {
            Ok(p) => p,
            Err(msg) => {
                warn!("unit {unit_id} {}: {msg}", frame.name);
                self.stats.lock().unwrap().auth_failures += 1;
                return Ack::Error(msg);
            }
        };
        let rows = match read_csv(&plaintext) {
            Ok(r) => r,
            Err(e) => {
                warn!("unit {unit_id} {}: malformed CSV: {e}", frame.name);
                self.stats.lock().unwrap().malformed += 1;
                return Ack::Error(format!("malformed CSV: {e}"));
            }
        };
        let key = (unit_id, frame.name.clone());
        if self.persisted.lock().unwrap().contains(&key) {
            // A resend after a lost ACK: already stored and queued.
            self.stats.lock().unwrap().duplicates += 1;
            return Ack::Ok;
        }
        if let Err(e) = self.persist(unit_id, &frame.name, &plaintext) {
            warn!("unit {unit_id} {}: storage failed: {e}", frame.name);
            self.stats.lock().unwrap().storage_errors += 1;
            return Ack::Error(format!("storage failed: {e}"));
        }
        self.persisted.lock().unwrap().insert(key);
        self.stats.lock().unwrap().files_persisted += 1;
        let _ = jobs.send(Job {
            unit_id,
            name: frame.name.clone(),
            rows,
            received,
        });
        Ack::Ok
    }

    fn decrypt(&self, frame: &Frame) -> Result<Vec<u8>, String> {
        let blob = EncryptedBlob::decode(&frame.payload).map_err(|e| format!("authentication failed: {e}"))?;
        if blob.key_id != frame.unit_id {
            return Err(format!(
                "authentication failed: key id {} does not match unit {}",
                blob.key_id, frame.unit_id
            ));
        }
        let key = self
            .config
            .unit_keys
            .get(&blob.key_id)
            .ok_or_else(|| format!("authentication failed: no key for unit {}", blob.key_id))?;
        blob.open(key).map_err(|e| e.to_string())
    }

    fn persist(&self, unit_id: u16, name: &str, plaintext: &[u8]) -> io::Result<()> {
        let path = blob_path(&self.config.storage_dir, unit_id, name);
        let dir = path.parent().expect("blob path has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.storage.seal(plaintext).encode())?;
        tmp.as_file().sync_data()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

/// Fails fast on a peer that has already closed, then writes the frame.
fn deliver(stream: &mut TcpStream, bytes: &[u8]) -> io::Result<()> {
    stream.set_nonblocking(true)?;
    let mut probe = [0u8; 1];
    let peeked = stream.peek(&mut probe);
    stream.set_nonblocking(false)?;
    match peeked {
        Ok(0) => return Err(io::Error::new(ErrorKind::ConnectionAborted, "TU closed the broadcast connection")),
        Ok(_) => {}
        Err(e) if e.kind() == ErrorKind::WouldBlock => {}
        Err(e) => return Err(e),
    }
    stream.set_write_timeout(Some(BROADCAST_WRITE_TIMEOUT))?;
    stream.write_all(bytes)?;
    stream.flush()
}

fn accept_data(shared: Arc<Shared>, listener: TcpListener, jobs: Sender<Job>) {
    for conn in listener.incoming() {
        if shared.stopping() {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("data accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let Ok(clone) = stream.try_clone() else { continue };
        let session = {
            let shared = Arc::clone(&shared);
            let jobs = jobs.clone();
            thread::Builder::new()
                .name("mu-session".into())
                .spawn(move || session(shared, stream, jobs))
        };
        match session {
            Ok(h) => {
                let mut sessions = shared.sessions.lock().unwrap();
                sessions.retain(|(_, h)| !h.is_finished());
                sessions.push((clone, h));
            }
            Err(e) => warn!("cannot spawn session: {e}"),
        }
    }
}

fn session(shared: Arc<Shared>, stream: TcpStream, jobs: Sender<Job>) {
    let peer = stream.peer_addr().ok();
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match read_frame(&mut reader, shared.config.max_payload) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                if !shared.stopping() {
                    debug!("session {peer:?} closed: {e}");
                }
                break;
            }
        };
        let ack = shared.handle_file(&frame, &jobs);
        if write_frame(&mut writer, &ack.to_frame(frame.unit_id, &frame.name)).is_err() {
            break;
        }
    }
}

fn accept_broadcast(shared: Arc<Shared>, listener: TcpListener) {
    for conn in listener.incoming() {
        if shared.stopping() {
            break;
        }
        let Ok(stream) = conn else { continue };
        let shared = Arc::clone(&shared);
        // The handshake runs off the acceptor so a silent client cannot block it.
        let _ = thread::Builder::new()
            .name("mu-register".into())
            .spawn(move || register(shared, stream));
    }
}

fn register(shared: Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    if stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).is_err() {
        return;
    }
    let mut reader = &stream;
    let frame = match read_frame(&mut reader, 1024) {
        Ok(Some(f)) if f.msg_type == MsgType::RegisterTu => f,
        Ok(_) => return,
        Err(e) => {
            debug!("broadcast handshake failed: {e}");
            return;
        }
    };
    let _ = stream.set_read_timeout(None);
    let mut subs = shared.subscribers.lock().unwrap();
    if shared.stopping() {
        return;
    }
    // A re-registration replaces the stale connection of the same unit.
    subs.retain(|s| {
        let stale = s.unit_id == frame.unit_id;
        if stale {
            let _ = s.stream.shutdown(Shutdown::Both);
        }
        !stale
    });
    info!("unit {} registered for broadcasts", frame.unit_id);
    subs.push(Subscriber {
        unit_id: frame.unit_id,
        stream,
    });
}

fn detector_worker(shared: Arc<Shared>, jobs: Receiver<Job>, reports: Sender<(AnomalyReport, Instant)>) {
    for job in jobs {
        for report in scan_file(job.unit_id, &job.name, &job.rows, &shared.config.detector) {
            info!(
                "anomaly at unit {} {} window {}: {:?} {:.3} V",
                report.unit_id, report.file_name, report.window_index, report.kind, report.rms_value
            );
            let _ = reports.send((report, job.received));
        }
    }
}

fn broadcaster(shared: Arc<Shared>, reports: Receiver<(AnomalyReport, Instant)>) {
    for (report, received) in reports {
        let outcome = shared.broadcast_fault(&report);
        shared.stats.lock().unwrap().broadcasts.push(BroadcastRecord {
            report,
            outcome,
            latency: received.elapsed(),
        });
    }
}
