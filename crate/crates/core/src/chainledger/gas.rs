//! Linear gas model: `g_base` per transaction, `g_hash` per registered entry
//! and `g_addr` per stored policy address.

use serde::{Deserialize, Serialize};

use super::tx::TxKind;
use super::LedgerError;

/// Observed gas for one single-hash registration in a 10-peer network,
/// indexed by the number of peers allowed to read the hash.
pub const TABLE1_GAS: [u64; 11] = [
    133_357, 153_595, 174_312, 194_558, 214_848, 235_158, 214_848, 194_558, 174_312, 153_595,
    133_357,
];

pub const TABLE1_NETWORK_SIZE: u16 = 10;

/// Share of the fitted intercept attributed to `g_hash`: a 34-byte hash
/// string fills two storage slots at about 20'000 gas each.
pub const HASH_SHARE_OF_INTERCEPT: f64 = 40_000.0 / 133_357.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasSchedule {
    pub g_base: u64,
    pub g_hash: u64,
    pub g_addr: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        Self {
            g_base: 93_357,
            g_hash: 40_000,
            g_addr: 20_372,
        }
    }
}

impl GasSchedule {
    pub fn new(g_base: u64, g_hash: u64, g_addr: u64) -> Result<Self, LedgerError> {
        let s = Self {
            g_base,
            g_hash,
            g_addr,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.g_base == 0 || self.g_hash == 0 || self.g_addr == 0 {
            return Err(LedgerError::InvalidSchedule(*self));
        }
        Ok(())
    }

    /// Gas for one registration of `hashes` entries with `policy_ids` stored ids.
    pub fn registration_gas(&self, hashes: u64, policy_ids: u64) -> u64 {
        self.g_base + hashes * self.g_hash + policy_ids * self.g_addr
    }
}

pub fn estimate_gas(kind: &TxKind, schedule: &GasSchedule) -> u64 {
    match kind {
        TxKind::RegisterFiles { entries, policy } => {
            schedule.registration_gas(entries.len() as u64, policy.ids.len() as u64)
        }
        TxKind::AnomalySignal { .. } => schedule.g_base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub schedule: GasSchedule,
    pub fit: LinearFit,
}

/// Ordinary least squares of `gas = intercept + k * slope`.
pub fn fit_line(observations: &[(u64, u64)]) -> Result<LinearFit, LedgerError> {
    let mut xs: Vec<u64> = observations.iter().map(|o| o.0).collect();
    xs.sort_unstable();
    xs.dedup();
    if xs.len() < 2 {
        return Err(LedgerError::DegenerateObservations);
    }
    let n = observations.len() as f64;
    let mean_x = observations.iter().map(|o| o.0 as f64).sum::<f64>() / n;
    let mean_y = observations.iter().map(|o| o.1 as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in observations {
        let dx = x as f64 - mean_x;
        sxy += dx * (y as f64 - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        intercept: mean_y - slope * mean_x,
        slope,
    })
}

/// Fits `(effective policy size, total gas)` observations of single-hash
/// registrations. Only `g_base + g_hash` and `g_addr` are identifiable; the
/// intercept is split by [`HASH_SHARE_OF_INTERCEPT`].
pub fn calibrate_schedule(observations: &[(u64, u64)]) -> Result<Calibration, LedgerError> {
    let fit = fit_line(observations)?;
    let intercept = fit.intercept.round();
    let slope = fit.slope.round();
    if intercept < 2.0 || slope < 1.0 {
        return Err(LedgerError::DegenerateObservations);
    }
    let g_hash = (fit.intercept * HASH_SHARE_OF_INTERCEPT).round().max(1.0) as u64;
    let total = intercept as u64;
    let schedule = GasSchedule::new(total.saturating_sub(g_hash), g_hash, slope as u64)?;
    Ok(Calibration { schedule, fit })
}

/// The distinct points of [`TABLE1_GAS`]: effective policy sizes 0 through 5.
pub fn table1_observations() -> Vec<(u64, u64)> {
    let half = usize::from(TABLE1_NETWORK_SIZE / 2);
    TABLE1_GAS[..=half]
        .iter()
        .enumerate()
        .map(|(k, &g)| (k as u64, g))
        .collect()
}
