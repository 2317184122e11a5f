//! Transfer Unit client.
//!
//! A generator thread cuts the sample stream into files and queues them; a
//! sender thread encrypts and ships each file in order, retrying with
//! backoff until it is acknowledged. Generation never waits on the network.

use std::io::{self, BufReader, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::crypto::{Sealer, SymmetricKey};
use super::frame::{read_frame, report_from_frame, write_frame, Ack, Frame, FrameError, MsgType};
use super::ledger::{GeneratedEntry, SendOutcome, SentEntry, TransferLedger};
use super::{sleep_unless, wait_until, RetryPolicy};
use crate::detector::AnomalyReport;
use crate::waveform::{
    file_name, stream_samples, write_rows, FaultSpec, StreamHandle, StreamOptions, VoltageSample,
    WaveformConfig, WaveformError,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const ACK_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_ACK_PAYLOAD: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum TuError {
    #[error("invalid TU config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// A fault placed inside one file, with sample positions relative to that file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FileFault {
    pub file_index: u32,
    pub fault: FaultSpec,
}

#[derive(Debug, Clone)]
pub struct TuConfig {
    pub unit_id: u16,
    pub waveform: WaveformConfig,
    pub rows_per_file: usize,
    /// `None` generates until stopped.
    pub max_files: Option<u32>,
    pub data_addr: SocketAddr,
    /// Where to listen for fault broadcasts; `None` skips registration.
    pub broadcast_addr: Option<SocketAddr>,
    pub key: SymmetricKey,
    pub pacing: bool,
    pub retry: RetryPolicy,
    pub faults: Vec<FileFault>,
}

impl TuConfig {
    pub fn new(unit_id: u16, data_addr: SocketAddr, key: SymmetricKey) -> Self {
        Self {
            unit_id,
            waveform: WaveformConfig::default().with_seed(u64::from(unit_id)),
            rows_per_file: 2000,
            max_files: Some(10),
            data_addr,
            broadcast_addr: None,
            key,
            pacing: true,
            retry: RetryPolicy::default(),
            faults: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TuError> {
        self.waveform.validate()?;
        if self.rows_per_file == 0 {
            return Err(TuError::InvalidConfig("rows_per_file must be positive".into()));
        }
        if self.retry.initial_ms == 0 {
            return Err(TuError::InvalidConfig("retry.initial_ms must be positive".into()));
        }
        for f in &self.faults {
            f.fault.validate()?;
            if f.fault.end() > self.rows_per_file as u64 {
                return Err(TuError::InvalidConfig(format!(
                    "fault in file {} ends at sample {}, past the {}-row file",
                    f.file_index,
                    f.fault.end(),
                    self.rows_per_file
                )));
            }
            if self.max_files.is_some_and(|m| f.file_index >= m) {
                return Err(TuError::InvalidConfig(format!("fault targets file {} beyond max_files", f.file_index)));
            }
        }
        Ok(())
    }

    /// Faults translated to positions in the continuous sample stream.
    fn stream_faults(&self) -> Vec<FaultSpec> {
        let rows = self.rows_per_file as u64;
        self.faults
            .iter()
            .map(|f| f.fault.shifted(u64::from(f.file_index) * rows))
            .collect()
    }
}

/// Broadcast connection shared with the handle so it can be closed from outside.
#[derive(Default)]
struct BroadcastLink {
    stream: Mutex<Option<TcpStream>>,
    closed: AtomicBool,
    registered: AtomicBool,
}

pub struct TuHandle {
    unit_id: u16,
    max_files: Option<u32>,
    ledger: Arc<TransferLedger>,
    faults: Arc<Mutex<Vec<AnomalyReport>>>,
    failure: Arc<Mutex<Option<String>>>,
    stop: Arc<AtomicBool>,
    link: Arc<BroadcastLink>,
    stream: Option<StreamHandle>,
    threads: Vec<JoinHandle<()>>,
}

pub fn tu_run(config: TuConfig) -> Result<TuHandle, TuError> {
    config.validate()?;
    let ledger = Arc::new(TransferLedger::new());
    let faults = Arc::new(Mutex::new(Vec::new()));
    let failure = Arc::new(Mutex::new(None));
    let stop = Arc::new(AtomicBool::new(false));
    let link = Arc::new(BroadcastLink::default());
    let (file_tx, file_rx) = mpsc::channel::<(String, Vec<u8>)>();

    let rows_per_file = config.rows_per_file;
    let unit_id = config.unit_id;
    let mut buffer: Vec<VoltageSample> = Vec::with_capacity(rows_per_file);
    let mut sequence = 0u32;
    let stream = stream_samples(
        &config.waveform,
        StreamOptions {
            pacing: config.pacing,
            limit: config.max_files.map(|m| u64::from(m) * rows_per_file as u64),
            faults: config.stream_faults(),
        },
        {
            let ledger = Arc::clone(&ledger);
            move |sample| {
                buffer.push(sample);
                if buffer.len() == rows_per_file {
                    let name = file_name(unit_id, sequence);
                    let csv = write_rows(&buffer);
                    // Recorded before queueing so a file is never sent before it is generated.
                    ledger
                        .record_generated(&name, GeneratedEntry::now(buffer.len(), csv.len()))
                        .expect("sequence numbers are unique");
                    debug!("unit {unit_id} generated {name}");
                    let _ = file_tx.send((name, csv));
                    buffer.clear();
                    sequence += 1;
                }
            }
        },
    )?;

    let mut threads = vec![{
        let sender = FileSender {
            unit_id,
            addr: config.data_addr,
            sealer: Sealer::new(unit_id, &config.key),
            retry: config.retry.clone(),
            ledger: Arc::clone(&ledger),
            stop: Arc::clone(&stop),
            failure: Arc::clone(&failure),
        };
        thread::Builder::new()
            .name(format!("tu{unit_id}-send"))
            .spawn(move || sender.run(file_rx))
            .expect("spawn sender thread")
    }];
    if let Some(addr) = config.broadcast_addr {
        let listener = Listener {
            unit_id,
            addr,
            retry: config.retry.clone(),
            link: Arc::clone(&link),
            faults: Arc::clone(&faults),
            stop: Arc::clone(&stop),
        };
        threads.push(
            thread::Builder::new()
                .name(format!("tu{unit_id}-bcast"))
                .spawn(move || listener.run())
                .expect("spawn broadcast thread"),
        );
    }
    Ok(TuHandle {
        unit_id,
        max_files: config.max_files,
        ledger,
        faults,
        failure,
        stop,
        link,
        stream: Some(stream),
        threads,
    })
}

impl TuHandle {
    pub fn unit_id(&self) -> u16 {
        self.unit_id
    }

    pub fn ledger(&self) -> &Arc<TransferLedger> {
        &self.ledger
    }

    /// Fault broadcasts received so far.
    pub fn received_faults(&self) -> Vec<AnomalyReport> {
        self.faults.lock().unwrap().clone()
    }

    /// Set when the sender gave up after exhausting its retries.
    pub fn failure(&self) -> Option<String> {
        self.failure.lock().unwrap().clone()
    }

    pub fn is_registered(&self) -> bool {
        self.link.registered.load(Ordering::SeqCst)
    }

    pub fn wait_until_sent(&self, count: usize, timeout: Duration) -> bool {
        wait_until(timeout, || self.ledger.sent_count() >= count || self.failure().is_some())
            && self.ledger.sent_count() >= count
    }

    /// Waits until every one of `max_files` files is acknowledged or rejected.
    pub fn wait_until_done(&self, timeout: Duration) -> bool {
        let Some(m) = self.max_files else { return false };
        self.wait_until_sent(m as usize, timeout)
    }

    /// Drops the broadcast connection and does not reconnect.
    pub fn disconnect_broadcast(&self) {
        self.link.closed.store(true, Ordering::SeqCst);
        self.link.registered.store(false, Ordering::SeqCst);
        if let Some(s) = self.link.stream.lock().unwrap().take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    pub fn stop(mut self) -> Arc<TransferLedger> {
        self.shutdown();
        Arc::clone(&self.ledger)
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.stream.take() {
            s.stop();
        }
        self.disconnect_broadcast();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TuHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn open(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(ACK_TIMEOUT))?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    /// Sends one FILE frame and waits for its ACK.
    fn exchange(&mut self, frame: &Frame) -> Result<(Ack, Duration), FrameError> {
        let start = Instant::now();
        write_frame(&mut self.writer, frame)?;
        let reply = read_frame(&mut self.reader, MAX_ACK_PAYLOAD)?
            .ok_or_else(|| io::Error::new(ErrorKind::UnexpectedEof, "MU closed the connection"))?;
        if reply.name != frame.name {
            return Err(FrameError::BadPayload("ACK for a different file"));
        }
        Ok((Ack::from_frame(&reply)?, start.elapsed()))
    }
}

struct FileSender {
    unit_id: u16,
    addr: SocketAddr,
    sealer: Sealer,
    retry: RetryPolicy,
    ledger: Arc<TransferLedger>,
    stop: Arc<AtomicBool>,
    failure: Arc<Mutex<Option<String>>>,
}

impl FileSender {
    fn run(self, files: Receiver<(String, Vec<u8>)>) {
        let mut conn: Option<Connection> = None;
        loop {
            let (name, csv) = match files.recv_timeout(Duration::from_millis(50)) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) if self.stop.load(Ordering::SeqCst) => return,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return,
            };
            let payload = self.sealer.seal(&csv).encode();
            let frame = Frame::new(MsgType::File, self.unit_id, name.clone(), payload);
            if !self.deliver(&mut conn, &frame) {
                return;
            }
        }
    }

    /// Returns false when the sender must exit.
    fn deliver(&self, conn: &mut Option<Connection>, frame: &Frame) -> bool {
        let mut retries = 0u32;
        loop {
            if self.stop.load(Ordering::SeqCst) {
                return false;
            }
            let attempt = match conn {
                Some(c) => c.exchange(frame),
                None => Connection::open(self.addr)
                    .map_err(FrameError::from)
                    .and_then(|c| conn.insert(c).exchange(frame)),
            };
            match attempt {
                Ok((ack, transfer_time)) => {
                    let outcome = match ack {
                        Ack::Ok => SendOutcome::Acked,
                        Ack::Error(msg) => {
                            warn!("unit {} {} rejected: {msg}", self.unit_id, frame.name);
                            SendOutcome::Rejected(msg)
                        }
                    };
                    let entry = SentEntry {
                        outcome,
                        sent_at: SystemTime::now(),
                        transfer_time,
                        retries,
                    };
                    if let Err(e) = self.ledger.record_sent(&frame.name, entry) {
                        warn!("unit {}: {e}", self.unit_id);
                    }
                    return true;
                }
                Err(e) => {
                    *conn = None;
                    retries += 1;
                    if self.retry.exhausted(retries) {
                        let msg = format!("{}: giving up after {} retries: {e}", frame.name, retries - 1);
                        warn!("unit {} {msg}", self.unit_id);
                        *self.failure.lock().unwrap() = Some(msg);
                        return false;
                    }
                    debug!("unit {} {} attempt {retries} failed: {e}", self.unit_id, frame.name);
                    if !sleep_unless(self.retry.delay(retries), &self.stop) {
                        return false;
                    }
                }
            }
        }
    }
}

struct Listener {
    unit_id: u16,
    addr: SocketAddr,
    retry: RetryPolicy,
    link: Arc<BroadcastLink>,
    faults: Arc<Mutex<Vec<AnomalyReport>>>,
    stop: Arc<AtomicBool>,
}

impl Listener {
    fn done(&self) -> bool {
        self.stop.load(Ordering::SeqCst) || self.link.closed.load(Ordering::SeqCst)
    }

    fn run(self) {
        let mut failures = 0u32;
        while !self.done() {
            match self.connect() {
                Ok(stream) => {
                    failures = 0;
                    self.listen(stream);
                }
                Err(e) => {
                    failures += 1;
                    debug!("unit {} broadcast connect failed: {e}", self.unit_id);
                    if !sleep_unless(self.retry.delay(failures), &self.stop) {
                        return;
                    }
                }
            }
        }
    }

    fn connect(&self) -> Result<TcpStream, FrameError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT)?;
        stream.set_nodelay(true)?;
        write_frame(&mut stream, &Frame::new(MsgType::RegisterTu, self.unit_id, "", vec![]))?;
        Ok(stream)
    }

    fn listen(&self, stream: TcpStream) {
        {
            let mut slot = self.link.stream.lock().unwrap();
            if self.done() {
                return;
            }
            match stream.try_clone() {
                Ok(c) => *slot = Some(c),
                Err(_) => return,
            }
        }
        self.link.registered.store(true, Ordering::SeqCst);
        info!("unit {} listening for broadcasts", self.unit_id);
        let mut reader = BufReader::new(stream);
        while let Ok(Some(f)) = read_frame(&mut reader, MAX_ACK_PAYLOAD) {
            match report_from_frame(&f) {
                Ok(r) => {
                    info!("unit {} received fault at unit {} {}", self.unit_id, r.unit_id, r.file_name);
                    self.faults.lock().unwrap().push(r);
                }
                Err(e) => warn!("unit {}: bad broadcast: {e}", self.unit_id),
            }
        }
        self.link.registered.store(false, Ordering::SeqCst);
        self.link.stream.lock().unwrap().take();
    }
}
