//! Benchmark harness: the four experiments, their metric rows and the report
//! writer.

mod experiments;
mod metrics;
mod summary;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use experiments::{run_e1_transfer, run_e2_detect, run_e3_gas_batch, run_e4_gas_policy, run_experiment};
pub use metrics::{emit_results, median, MetricRow, ReportFiles, Value};
pub use summary::{summarize, verdicts, Verdict, VerdictStatus};

use crate::chainledger::LedgerError;
use crate::voltchain::VoltChainError;
use crate::voltstar::{MuError, TuError};
use crate::waveform::{CsvError, WaveformError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("no metric rows to emit")]
    NoRows,
    #[error("{mode} repetition {rep} failed: {cause}")]
    Repetition { mode: &'static str, rep: u32, cause: String },
    #[error("cannot write results to {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    VoltChain(#[from] VoltChainError),
    #[error(transparent)]
    Mu(#[from] MuError),
    #[error(transparent)]
    Tu(#[from] TuError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "E1-transfer")]
    E1Transfer,
    #[serde(rename = "E2-detect")]
    E2Detect,
    #[serde(rename = "E3-gas-batch")]
    E3GasBatch,
    #[serde(rename = "E4-gas-policy")]
    E4GasPolicy,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [Self::E1Transfer, Self::E2Detect, Self::E3GasBatch, Self::E4GasPolicy];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::E1Transfer => "E1-transfer",
            Self::E2Detect => "E2-detect",
            Self::E3GasBatch => "E3-gas-batch",
            Self::E4GasPolicy => "E4-gas-policy",
        }
    }

    pub fn is_timing(self) -> bool {
        matches!(self, Self::E1Transfer | Self::E2Detect)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts the full id or its short form, in any case: `E1-transfer`, `e1`.
impl FromStr for ExperimentId {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|id| {
                let full = id.as_str().to_ascii_lowercase();
                lower == full || lower == full[..2]
            })
            .ok_or_else(|| BenchError::UnknownExperiment(s.to_string()))
    }
}

/// Sweep lists and run shape shared by all experiments. Each experiment
/// reads only the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchParams {
    /// Rows per file for the transfer and single-file detection sweeps.
    pub rows: Vec<usize>,
    pub units: u16,
    pub files_per_unit: u32,
    /// Length of the stream split into files for the detection sweep.
    pub total_points: u64,
    pub split_sizes: Vec<usize>,
    pub total_hashes: usize,
    pub hashes_per_tx: Vec<usize>,
    pub network_size: u16,
    /// Numbers of allowed readers for the policy sweep.
    pub policy_sizes: Vec<u16>,
    pub repetitions: u32,
    pub seed: u64,
    pub pacing: bool,
    pub difficulty: u32,
    /// Seconds a transfer repetition may take before it is aborted.
    pub transfer_timeout_s: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            rows: vec![1_000, 5_000, 20_000, 100_000],
            units: 10,
            files_per_unit: 10,
            total_points: 1_000_000,
            split_sizes: vec![1_000, 5_000, 20_000, 100_000, 250_000, 500_000, 1_000_000],
            total_hashes: 100,
            hashes_per_tx: vec![1, 2, 5, 10, 20, 50, 100],
            network_size: 10,
            policy_sizes: (0..=10).collect(),
            repetitions: 5,
            seed: 1,
            pacing: false,
            difficulty: crate::chainledger::DEFAULT_DIFFICULTY,
            transfer_timeout_s: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub params: BenchParams,
}

impl ExperimentSpec {
    pub fn new(id: ExperimentId, params: BenchParams) -> Result<Self, BenchError> {
        let spec = Self { id, params };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_defaults(id: ExperimentId) -> Self {
        Self {
            id,
            params: BenchParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let p = &self.params;
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.id.is_timing() && p.repetitions < 3 {
            return bad(format!("{} needs at least 3 repetitions", self.id));
        }
        if p.repetitions == 0 {
            return bad("repetitions must be positive".into());
        }
        match self.id {
            ExperimentId::E1Transfer => {
                if p.rows.is_empty() {
                    return bad("rows sweep is empty".into());
                }
                if p.rows.contains(&0) {
                    return bad("rows must be positive".into());
                }
                if p.units == 0 || p.files_per_unit == 0 {
                    return bad("units and files_per_unit must be positive".into());
                }
                if p.transfer_timeout_s == 0 {
                    return bad("transfer_timeout_s must be positive".into());
                }
            }
            ExperimentId::E2Detect => {
                if p.rows.is_empty() || p.split_sizes.is_empty() {
                    return bad("rows and split_sizes sweeps must be non-empty".into());
                }
                if p.rows.contains(&0) || p.split_sizes.contains(&0) {
                    return bad("rows and split sizes must be positive".into());
                }
                if p.total_points == 0 {
                    return bad("total_points must be positive".into());
                }
            }
            ExperimentId::E3GasBatch => {
                if p.hashes_per_tx.is_empty() {
                    return bad("hashes_per_tx sweep is empty".into());
                }
                if p.hashes_per_tx.contains(&0) || p.total_hashes == 0 {
                    return bad("hash counts must be positive".into());
                }
            }
            ExperimentId::E4GasPolicy => {
                if p.policy_sizes.is_empty() {
                    return bad("policy_sizes sweep is empty".into());
                }
                if p.network_size == 0 {
                    return bad("network_size must be positive".into());
                }
                if let Some(k) = p.policy_sizes.iter().find(|&&k| k > p.network_size) {
                    return bad(format!("policy size {k} exceeds network size {}", p.network_size));
                }
            }
        }
        Ok(())
    }
}
