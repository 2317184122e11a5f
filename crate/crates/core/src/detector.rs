//! Windowed RMS anomaly detection.
//!
//! Rows are cut into consecutive, non-overlapping windows of
//! `window_cycles * samples_per_cycle` samples. A trailing partial window is
//! evaluated when it holds at least one full cycle and skipped otherwise.
//! A window is anomalous when its RMS leaves the closed band
//! `[lower_frac, upper_frac] * nominal_rms`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::{csv_rows, CsvError, DataFile, VoltageSample};

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("RMS of an empty window is undefined")]
    EmptyWindow,
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("no anomaly present in scanned rows")]
    NoAnomaly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub nominal_rms: f64,
    pub lower_frac: f64,
    pub upper_frac: f64,
    pub window_cycles: u32,
    pub samples_per_cycle: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            nominal_rms: 230.0,
            lower_frac: 0.9,
            upper_frac: 1.1,
            window_cycles: 10,
            samples_per_cycle: 200,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.into()));
        if !(self.nominal_rms.is_finite() && self.nominal_rms > 0.0) {
            return bad("nominal_rms must be positive");
        }
        if !(0.0 < self.lower_frac && self.lower_frac < 1.0 && 1.0 < self.upper_frac) {
            return bad("need 0 < lower_frac < 1 < upper_frac");
        }
        if self.window_cycles == 0 || self.samples_per_cycle == 0 {
            return bad("window_cycles and samples_per_cycle must be positive");
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.window_cycles as usize * self.samples_per_cycle as usize
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_frac * self.nominal_rms
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper_frac * self.nominal_rms
    }

    pub fn classify(&self, rms_value: f64) -> Option<AnomalyKind> {
        if rms_value < self.lower_bound() {
            Some(AnomalyKind::Undervoltage)
        } else if rms_value > self.upper_bound() {
            Some(AnomalyKind::Overvoltage)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Undervoltage,
    Overvoltage,
}

impl AnomalyKind {
    pub fn as_u8(self) -> u8 {
        match self {
            AnomalyKind::Undervoltage => 0,
            AnomalyKind::Overvoltage => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(AnomalyKind::Undervoltage),
            1 => Some(AnomalyKind::Overvoltage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub unit_id: u16,
    pub file_name: String,
    pub window_index: u64,
    pub rms_value: f64,
    pub kind: AnomalyKind,
    /// Timestamp of the last sample in the offending window.
    pub detected_at_us: u64,
}

pub fn rms(window: &[f64]) -> Result<f64, DetectorError> {
    if window.is_empty() {
        return Err(DetectorError::EmptyWindow);
    }
    let sum_sq: f64 = window.iter().map(|v| v * v).sum();
    Ok((sum_sq / window.len() as f64).sqrt())
}

fn rows_rms(rows: &[VoltageSample]) -> f64 {
    let sum_sq: f64 = rows.iter().map(|s| s.volts * s.volts).sum();
    (sum_sq / rows.len() as f64).sqrt()
}

/// Evaluated windows of `rows`, with their indices.
pub fn windows<'a>(
    rows: &'a [VoltageSample],
    config: &DetectorConfig,
) -> impl Iterator<Item = (u64, &'a [VoltageSample])> + 'a {
    let min_len = config.samples_per_cycle as usize;
    rows.chunks(config.window_len().max(1))
        .enumerate()
        .filter(move |(_, w)| w.len() >= min_len)
        .map(|(i, w)| (i as u64, w))
}

fn reports<'a>(
    unit_id: u16,
    file_name: &'a str,
    rows: &'a [VoltageSample],
    config: &'a DetectorConfig,
) -> impl Iterator<Item = AnomalyReport> + 'a {
    windows(rows, config).filter_map(move |(window_index, w)| {
        let rms_value = rows_rms(w);
        config.classify(rms_value).map(|kind| AnomalyReport {
            unit_id,
            file_name: file_name.to_string(),
            window_index,
            rms_value,
            kind,
            detected_at_us: w[w.len() - 1].timestamp_us,
        })
    })
}

/// Every out-of-band window in `rows`, in order.
pub fn scan_file(
    unit_id: u16,
    file_name: &str,
    rows: &[VoltageSample],
    config: &DetectorConfig,
) -> Vec<AnomalyReport> {
    reports(unit_id, file_name, rows, config).collect()
}

pub fn scan_data_file(file: &DataFile, config: &DetectorConfig) -> Vec<AnomalyReport> {
    scan_file(file.unit_id, &file.name(), file.rows(), config)
}

/// Stops at the first out-of-band window.
pub fn first_anomaly(
    unit_id: u16,
    file_name: &str,
    rows: &[VoltageSample],
    config: &DetectorConfig,
) -> Option<AnomalyReport> {
    reports(unit_id, file_name, rows, config).next()
}

/// Parses CSV bytes window by window and stops at the first out-of-band
/// window, so an early fault is found without reading the rest of the file.
/// Agrees with [`first_anomaly`] over [`crate::waveform::read_csv`].
pub fn first_anomaly_in_csv(
    unit_id: u16,
    file_name: &str,
    bytes: &[u8],
    config: &DetectorConfig,
) -> Result<Option<AnomalyReport>, CsvError> {
    let len = config.window_len().max(1);
    let mut window: Vec<VoltageSample> = Vec::with_capacity(len);
    let mut window_index = 0u64;
    let mut any = false;
    let evaluate = |w: &[VoltageSample], window_index: u64| {
        config.classify(rows_rms(w)).map(|kind| AnomalyReport {
            unit_id,
            file_name: file_name.to_string(),
            window_index,
            rms_value: rows_rms(w),
            kind,
            detected_at_us: w[w.len() - 1].timestamp_us,
        })
    };
    for row in csv_rows(bytes)? {
        window.push(row?);
        any = true;
        if window.len() == len {
            if let Some(r) = evaluate(&window, window_index) {
                return Ok(Some(r));
            }
            window.clear();
            window_index += 1;
        }
    }
    if !any {
        return Err(CsvError::Empty);
    }
    if window.len() >= config.samples_per_cycle as usize {
        return Ok(evaluate(&window, window_index));
    }
    Ok(None)
}

/// Monotonic time source for latency measurement.
pub trait Clock {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Time from scan start until the first report is produced.
pub fn detection_latency(
    rows: &[VoltageSample],
    config: &DetectorConfig,
    clock: &dyn Clock,
) -> Result<(Duration, AnomalyReport), DetectorError> {
    let start = clock.now();
    let report = first_anomaly(0, "", rows, config).ok_or(DetectorError::NoAnomaly)?;
    Ok((clock.now().saturating_sub(start), report))
}
