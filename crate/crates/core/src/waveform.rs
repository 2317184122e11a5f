//! Simulated 50 Hz voltage source.
//!
//! Samples follow `m_i * A * sin(2*pi*i / samples_per_cycle) + e_i` where `m_i`
//! is the multiplier of the fault covering index `i` (1 when none) and `e_i`
//! is uniform noise drawn from a ChaCha8 stream seeded by the config. One
//! noise draw is consumed per sample regardless of the noise amplitude, so the
//! sequence for a given seed never depends on which faults are injected.
//!
//! The CSV codec is bit-exact: header `timestamp_us,volts`, LF line endings,
//! volts with six decimals.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CSV header line, without the trailing newline.
pub const CSV_HEADER: &str = "timestamp_us,volts";

/// 230 V RMS times sqrt(2), about 325.27 V.
pub const DEFAULT_AMPLITUDE_PEAK: f64 = 230.0 * std::f64::consts::SQRT_2;

#[derive(Debug, Error, PartialEq)]
pub enum WaveformError {
    #[error("invalid waveform config: {0}")]
    InvalidConfig(String),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("faults overlap: [{a_start}, {a_end}) and [{b_start}, {b_end})")]
    OverlappingFaults {
        a_start: u64,
        a_end: u64,
        b_start: u64,
        b_end: u64,
    },
    #[error("fault window [{start}, {end}) outside generated range of {n_samples} samples")]
    FaultOutOfRange { start: u64, end: u64, n_samples: u64 },
    #[error("n_samples must be positive")]
    NoSamples,
    #[error("data file must contain at least one row")]
    EmptyFile,
}

#[derive(Debug, Error, PartialEq)]
pub enum CsvError {
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("line 1: expected header `{CSV_HEADER}`")]
    BadHeader,
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("file contains no rows")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveformConfig {
    pub frequency_hz: f64,
    pub samples_per_cycle: u32,
    pub amplitude_peak: f64,
    /// Half-width of the additive uniform noise, in volts.
    pub noise_amplitude: f64,
    pub seed: u64,
    /// Only used for pacing streamed output.
    pub baud_rate: u32,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self {
            frequency_hz: 50.0,
            samples_per_cycle: 200,
            amplitude_peak: DEFAULT_AMPLITUDE_PEAK,
            noise_amplitude: 2.0,
            seed: 0,
            baud_rate: 9600,
        }
    }
}

impl WaveformConfig {
    pub fn noiseless() -> Self {
        Self {
            noise_amplitude: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        let bad = |m: &str| Err(WaveformError::InvalidConfig(m.to_string()));
        if !(self.frequency_hz.is_finite() && self.frequency_hz > 0.0) {
            return bad("frequency_hz must be positive");
        }
        if self.samples_per_cycle < 2 {
            return bad("samples_per_cycle must be at least 2");
        }
        if !(self.amplitude_peak.is_finite() && self.amplitude_peak > 0.0) {
            return bad("amplitude_peak must be positive");
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return bad("noise_amplitude must be non-negative");
        }
        // Timestamps are whole microseconds and must stay strictly increasing.
        if self.sample_interval_us() < 1.0 {
            return bad("sample rate above 1 MHz cannot be timestamped in microseconds");
        }
        Ok(())
    }

    /// Spacing between consecutive samples in microseconds.
    pub fn sample_interval_us(&self) -> f64 {
        1e6 / (self.frequency_hz * f64::from(self.samples_per_cycle))
    }

    pub fn timestamp_us(&self, index: u64) -> u64 {
        (index as f64 * self.sample_interval_us()).round() as u64
    }

    /// RMS of the clean sine.
    pub fn nominal_rms(&self) -> f64 {
        self.amplitude_peak / 2f64.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoltageSample {
    pub timestamp_us: u64,
    pub volts: f64,
}

impl VoltageSample {
    pub fn new(timestamp_us: u64, volts: f64) -> Self {
        Self {
            timestamp_us,
            volts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Sag,
    Swell,
    Outage,
}

/// A multiplicative amplitude fault over `[start_sample, start_sample + duration_samples)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub magnitude_frac: f64,
    pub start_sample: u64,
    pub duration_samples: u64,
}

impl FaultSpec {
    pub fn sag(start_sample: u64, duration_samples: u64, magnitude_frac: f64) -> Self {
        Self {
            kind: FaultKind::Sag,
            magnitude_frac,
            start_sample,
            duration_samples,
        }
    }

    pub fn swell(start_sample: u64, duration_samples: u64, magnitude_frac: f64) -> Self {
        Self {
            kind: FaultKind::Swell,
            magnitude_frac,
            start_sample,
            duration_samples,
        }
    }

    pub fn outage(start_sample: u64, duration_samples: u64) -> Self {
        Self {
            kind: FaultKind::Outage,
            magnitude_frac: 0.0,
            start_sample,
            duration_samples,
        }
    }

    /// Exclusive end index.
    pub fn end(&self) -> u64 {
        self.start_sample.saturating_add(self.duration_samples)
    }

    pub fn covers(&self, index: u64) -> bool {
        index >= self.start_sample && index < self.end()
    }

    /// Same fault moved by `offset` samples.
    pub fn shifted(mut self, offset: u64) -> Self {
        self.start_sample += offset;
        self
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        if self.duration_samples == 0 {
            return Err(WaveformError::InvalidFault("duration must be positive".into()));
        }
        let m = self.magnitude_frac;
        let ok = match self.kind {
            FaultKind::Sag => m > 0.0 && m < 1.0,
            FaultKind::Swell => m.is_finite() && m > 1.0,
            FaultKind::Outage => m == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(WaveformError::InvalidFault(format!(
                "magnitude {m} not valid for {:?}",
                self.kind
            )))
        }
    }
}

fn validate_faults(faults: &[FaultSpec]) -> Result<Vec<FaultSpec>, WaveformError> {
    let mut sorted = faults.to_vec();
    for f in &sorted {
        f.validate()?;
    }
    sorted.sort_by_key(|f| f.start_sample);
    for pair in sorted.windows(2) {
        if pair[1].start_sample < pair[0].end() {
            return Err(WaveformError::OverlappingFaults {
                a_start: pair[0].start_sample,
                a_end: pair[0].end(),
                b_start: pair[1].start_sample,
                b_end: pair[1].end(),
            });
        }
    }
    Ok(sorted)
}

/// Unbounded, deterministic sample iterator.
#[derive(Debug, Clone)]
pub struct SampleStream {
    config: WaveformConfig,
    faults: Vec<FaultSpec>,
    rng: ChaCha8Rng,
    index: u64,
    fault_cursor: usize,
}

impl SampleStream {
    pub fn new(config: WaveformConfig, faults: &[FaultSpec]) -> Result<Self, WaveformError> {
        config.validate()?;
        let faults = validate_faults(faults)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            faults,
            index: 0,
            fault_cursor: 0,
        })
    }

    /// Index of the next sample to be produced.
    pub fn position(&self) -> u64 {
        self.index
    }

    fn multiplier(&mut self, index: u64) -> f64 {
        while self.fault_cursor < self.faults.len() && self.faults[self.fault_cursor].end() <= index
        {
            self.fault_cursor += 1;
        }
        match self.faults.get(self.fault_cursor) {
            Some(f) if f.covers(index) => f.magnitude_frac,
            _ => 1.0,
        }
    }
}

impl Iterator for SampleStream {
    type Item = VoltageSample;

    fn next(&mut self) -> Option<VoltageSample> {
        let i = self.index;
        let spc = f64::from(self.config.samples_per_cycle);
        // Reduce the phase index first so long streams keep full precision.
        let phase = (i % u64::from(self.config.samples_per_cycle)) as f64;
        let clean = self.config.amplitude_peak * (2.0 * PI * phase / spc).sin();
        let u: f64 = self.rng.gen();
        let noise = self.config.noise_amplitude * (2.0 * u - 1.0);
        let volts = self.multiplier(i) * clean + noise;
        self.index += 1;
        Some(VoltageSample::new(self.config.timestamp_us(i), volts))
    }
}

/// Generates `n_samples` samples starting at stream index 0.
pub fn generate_samples(
    config: &WaveformConfig,
    n_samples: u64,
    faults: &[FaultSpec],
) -> Result<Vec<VoltageSample>, WaveformError> {
    if n_samples == 0 {
        return Err(WaveformError::NoSamples);
    }
    if let Some(f) = faults.iter().find(|f| f.end() > n_samples) {
        return Err(WaveformError::FaultOutOfRange {
            start: f.start_sample,
            end: f.end(),
            n_samples,
        });
    }
    let stream = SampleStream::new(config.clone(), faults)?;
    Ok(stream.take(n_samples as usize).collect())
}

/// A batch of consecutive samples from one unit, the unit of transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFile {
    pub unit_id: u16,
    pub sequence_no: u32,
    rows: Vec<VoltageSample>,
}

impl DataFile {
    pub fn new(
        unit_id: u16,
        sequence_no: u32,
        rows: Vec<VoltageSample>,
    ) -> Result<Self, WaveformError> {
        if rows.is_empty() {
            return Err(WaveformError::EmptyFile);
        }
        Ok(Self {
            unit_id,
            sequence_no,
            rows,
        })
    }

    pub fn name(&self) -> String {
        file_name(self.unit_id, self.sequence_no)
    }

    pub fn rows(&self) -> &[VoltageSample] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<VoltageSample> {
        self.rows
    }

    pub fn to_csv(&self) -> Vec<u8> {
        write_csv(self)
    }
}

pub fn file_name(unit_id: u16, sequence_no: u32) -> String {
    format!("u{unit_id}_f{sequence_no}.csv")
}

/// Formats one CSV row including its trailing LF.
pub fn format_row(sample: &VoltageSample) -> String {
    format!("{},{:.6}\n", sample.timestamp_us, sample.volts)
}

pub fn write_csv(file: &DataFile) -> Vec<u8> {
    write_rows(file.rows())
}

pub fn write_rows(rows: &[VoltageSample]) -> Vec<u8> {
    let mut out = String::with_capacity(CSV_HEADER.len() + 1 + rows.len() * 20);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:.6}", r.timestamp_us, r.volts);
    }
    out.into_bytes()
}

/// Row-by-row CSV reader, so callers can stop before parsing the whole file.
#[derive(Debug)]
pub struct CsvRows<'a> {
    lines: std::iter::Enumerate<std::str::Split<'a, char>>,
    prev_ts: Option<u64>,
    failed: bool,
}

/// Checks encoding and header; rows are parsed lazily.
pub fn csv_rows(bytes: &[u8]) -> Result<CsvRows<'_>, CsvError> {
    let text = std::str::from_utf8(bytes).map_err(|_| CsvError::NotUtf8)?;
    // A single trailing LF terminates the last row.
    let body = text.strip_suffix('\n').unwrap_or(text);
    let mut lines = body.split('\n');
    if lines.next() != Some(CSV_HEADER) {
        return Err(CsvError::BadHeader);
    }
    Ok(CsvRows {
        lines: lines.enumerate(),
        prev_ts: None,
        failed: false,
    })
}

impl CsvRows<'_> {
    fn parse(&mut self, line_no: usize, line: &str) -> Result<VoltageSample, CsvError> {
        let bad = |reason: String| CsvError::BadRow {
            line: line_no,
            reason,
        };
        if line.is_empty() {
            return Err(bad("empty line".into()));
        }
        let (ts, volts) = line
            .split_once(',')
            .ok_or_else(|| bad("expected two comma-separated fields".into()))?;
        let timestamp_us: u64 = ts
            .parse()
            .map_err(|_| bad(format!("invalid timestamp `{ts}`")))?;
        let volts: f64 = volts
            .parse()
            .map_err(|_| bad(format!("invalid voltage `{volts}`")))?;
        if !volts.is_finite() {
            return Err(bad(format!("non-finite voltage `{volts}`")));
        }
        if self.prev_ts.is_some_and(|p| timestamp_us <= p) {
            return Err(bad("timestamps must be strictly increasing".into()));
        }
        self.prev_ts = Some(timestamp_us);
        Ok(VoltageSample::new(timestamp_us, volts))
    }
}

impl Iterator for CsvRows<'_> {
    type Item = Result<VoltageSample, CsvError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let (offset, line) = self.lines.next()?;
        let row = self.parse(offset + 2, line);
        self.failed = row.is_err();
        Some(row)
    }
}

pub fn read_csv(bytes: &[u8]) -> Result<Vec<VoltageSample>, CsvError> {
    let rows = csv_rows(bytes)?.collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(CsvError::Empty);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default)]
pub struct StreamOptions {
    /// Pace delivery to the configured baud rate (10 bits per byte).
    pub pacing: bool,
    /// Stop after this many samples; `None` streams until stopped.
    pub limit: Option<u64>,
    pub faults: Vec<FaultSpec>,
}

/// Handle to a running sample stream. Dropping it stops the stream.
#[derive(Debug)]
pub struct StreamHandle {
    stop: Arc<AtomicBool>,
    delivered: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl StreamHandle {
    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::SeqCst)
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Stops the stream and waits for the producer to exit. No sample is
    /// delivered after this returns.
    pub fn stop(mut self) -> u64 {
        self.shutdown();
        self.delivered()
    }

    /// Waits for a bounded stream to finish on its own.
    pub fn join(mut self) -> u64 {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.delivered()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StreamHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Delivers generated samples to `sink` on a dedicated thread, optionally
/// paced like a serial line at `config.baud_rate`.
pub fn stream_samples<F>(
    config: &WaveformConfig,
    options: StreamOptions,
    mut sink: F,
) -> Result<StreamHandle, WaveformError>
where
    F: FnMut(VoltageSample) + Send + 'static,
{
    if options.pacing && config.baud_rate == 0 {
        return Err(WaveformError::InvalidConfig("baud_rate must be positive".into()));
    }
    let mut samples = SampleStream::new(config.clone(), &options.faults)?;
    let stop = Arc::new(AtomicBool::new(false));
    let delivered = Arc::new(AtomicU64::new(0));
    let bytes_per_sec = f64::from(config.baud_rate) / 10.0;

    let thread = {
        let stop = Arc::clone(&stop);
        let delivered = Arc::clone(&delivered);
        thread::Builder::new()
            .name("sample-stream".into())
            .spawn(move || {
                let started = Instant::now();
                let mut bytes_sent = 0u64;
                while !stop.load(Ordering::SeqCst) {
                    if options.limit.is_some_and(|l| delivered.load(Ordering::SeqCst) >= l) {
                        break;
                    }
                    let Some(sample) = samples.next() else { break };
                    if options.pacing {
                        bytes_sent += format_row(&sample).len() as u64;
                        let due = started + Duration::from_secs_f64(bytes_sent as f64 / bytes_per_sec);
                        if !sleep_until(due, &stop) {
                            break;
                        }
                    }
                    sink(sample);
                    delivered.fetch_add(1, Ordering::SeqCst);
                }
            })
            .expect("spawn sample stream thread")
    };
    Ok(StreamHandle {
        stop,
        delivered,
        thread: Some(thread),
    })
}

/// Sleeps until `due` in short slices; returns false if stopped meanwhile.
fn sleep_until(due: Instant, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let now = Instant::now();
        if now >= due {
            return true;
        }
        thread::sleep((due - now).min(Duration::from_millis(20)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_zero_is_zero_volts() {
        let s = generate_samples(&WaveformConfig::noiseless(), 1, &[]).unwrap();
        assert_eq!(s[0].volts, 0.0);
        assert_eq!(s[0].timestamp_us, 0);
    }

    fn peak_325_27() -> WaveformConfig {
        WaveformConfig {
            amplitude_peak: 325.27,
            ..WaveformConfig::noiseless()
        }
    }

    #[test]
    fn quarter_cycle_is_peak() {
        let s = generate_samples(&peak_325_27(), 51, &[]).unwrap();
        assert!((s[50].volts - 325.27).abs() < 1e-9);
    }

    #[test]
    fn sag_scales_peak() {
        let faults = [FaultSpec::sag(40, 20, 0.5)];
        let s = generate_samples(&peak_325_27(), 100, &faults).unwrap();
        assert!((s[50].volts - 162.635).abs() < 1e-9);
    }

    #[test]
    fn whole_cycles_have_exact_rms() {
        for cfg in [WaveformConfig::noiseless(), peak_325_27()] {
            for cycles in [1, 3, 10] {
                let n = cycles * 200;
                let s = generate_samples(&cfg, n, &[]).unwrap();
                let ms = s.iter().map(|x| x.volts * x.volts).sum::<f64>() / n as f64;
                let expected = cfg.amplitude_peak / 2f64.sqrt();
                assert!((ms.sqrt() - expected).abs() / expected < 1e-9);
            }
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let cfg = WaveformConfig {
            noise_amplitude: 5.0,
            seed: 42,
            ..WaveformConfig::default()
        };
        let a = generate_samples(&cfg, 400, &[]).unwrap();
        let b = generate_samples(&cfg, 400, &[]).unwrap();
        assert_eq!(a, b);
        let clean = generate_samples(&WaveformConfig::noiseless(), 400, &[]).unwrap();
        for (n, c) in a.iter().zip(&clean) {
            assert!((n.volts - c.volts).abs() <= 5.0);
        }
        let other = generate_samples(&cfg.clone().with_seed(43), 400, &[]).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn timestamps_are_100us_apart_at_defaults() {
        let s = generate_samples(&WaveformConfig::default(), 5, &[]).unwrap();
        let ts: Vec<u64> = s.iter().map(|x| x.timestamp_us).collect();
        assert_eq!(ts, vec![0, 100, 200, 300, 400]);
    }

    #[test]
    fn overlapping_faults_rejected() {
        let faults = [FaultSpec::sag(0, 10, 0.5), FaultSpec::swell(9, 5, 1.2)];
        assert!(matches!(
            generate_samples(&WaveformConfig::default(), 100, &faults),
            Err(WaveformError::OverlappingFaults { .. })
        ));
    }

    #[test]
    fn adjacent_faults_allowed() {
        let faults = [FaultSpec::sag(0, 10, 0.5), FaultSpec::swell(10, 5, 1.2)];
        assert!(generate_samples(&WaveformConfig::default(), 100, &faults).is_ok());
    }

    #[test]
    fn out_of_range_fault_rejected() {
        let faults = [FaultSpec::outage(90, 11)];
        assert!(matches!(
            generate_samples(&WaveformConfig::default(), 100, &faults),
            Err(WaveformError::FaultOutOfRange { .. })
        ));
    }

    #[test]
    fn bad_fault_magnitudes_rejected() {
        for f in [
            FaultSpec::sag(0, 1, 1.0),
            FaultSpec::sag(0, 1, 0.0),
            FaultSpec::swell(0, 1, 0.9),
            FaultSpec { magnitude_frac: 0.5, ..FaultSpec::outage(0, 1) },
            FaultSpec::outage(0, 0),
        ] {
            assert!(f.validate().is_err(), "{f:?}");
        }
    }

    #[test]
    fn config_validation() {
        let base = WaveformConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            WaveformConfig { frequency_hz: 0.0, ..base.clone() },
            WaveformConfig { samples_per_cycle: 1, ..base.clone() },
            WaveformConfig { amplitude_peak: -1.0, ..base.clone() },
            WaveformConfig { noise_amplitude: -0.1, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn csv_single_row_is_bit_exact() {
        let f = DataFile::new(0, 0, vec![VoltageSample::new(0, 0.0)]).unwrap();
        assert_eq!(write_csv(&f), b"timestamp_us,volts\n0,0.000000\n");
    }

    #[test]
    fn csv_line_count() {
        let rows = generate_samples(&WaveformConfig::default(), 2000, &[]).unwrap();
        let bytes = write_csv(&DataFile::new(1, 2, rows).unwrap());
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 2001);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn csv_header_only_is_empty_error() {
        assert_eq!(read_csv(b"timestamp_us,volts\n"), Err(CsvError::Empty));
        assert_eq!(read_csv(b"timestamp_us,volts"), Err(CsvError::Empty));
    }

    #[test]
    fn csv_bad_volts_reports_line() {
        let err = read_csv(b"timestamp_us,volts\n0,1.0\n100,abc\n").unwrap_err();
        assert!(matches!(err, CsvError::BadRow { line: 3, .. }), "{err}");
    }

    #[test]
    fn csv_bad_header() {
        assert_eq!(read_csv(b"ts,v\n0,1.0\n"), Err(CsvError::BadHeader));
    }

    #[test]
    fn csv_rejects_blank_interior_line() {
        let err = read_csv(b"timestamp_us,volts\n0,1.0\n\n100,2.0\n").unwrap_err();
        assert!(matches!(err, CsvError::BadRow { line: 3, .. }), "{err}");
    }

    #[test]
    fn file_name_format() {
        let f = DataFile::new(3, 1, vec![VoltageSample::default()]).unwrap();
        assert_eq!(f.name(), "u3_f1.csv");
        assert_eq!(DataFile::new(3, 1, vec![]), Err(WaveformError::EmptyFile));
    }

    #[test]
    fn unpaced_stream_delivers_limit() {
        let (tx, rx) = std::sync::mpsc::channel();
        let h = stream_samples(
            &WaveformConfig::default(),
            StreamOptions { limit: Some(5000), ..Default::default() },
            move |s| {
                let _ = tx.send(s);
            },
        )
        .unwrap();
        assert_eq!(h.join(), 5000);
        let got: Vec<_> = rx.iter().collect();
        let expected = generate_samples(&WaveformConfig::default(), 5000, &[]).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn stopped_stream_delivers_nothing_more() {
        let count = Arc::new(AtomicU64::new(0));
        let c = Arc::clone(&count);
        let h = stream_samples(
            &WaveformConfig::default(),
            StreamOptions { pacing: true, ..Default::default() },
            move |_| {
                c.fetch_add(1, Ordering::SeqCst);
            },
        )
        .unwrap();
        thread::sleep(Duration::from_millis(100));
        let at_stop = h.stop();
        thread::sleep(Duration::from_millis(100));
        assert_eq!(count.load(Ordering::SeqCst), at_stop);
    }
}
