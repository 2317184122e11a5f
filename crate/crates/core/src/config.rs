//! TOML configuration covering both modes and the benchmark harness.
//! Every field has a default, so an empty document is a valid config.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::BenchParams;
use crate::detector::DetectorConfig;
use crate::voltchain::VoltChainConfig;
use crate::voltstar::{FileFault, MuConfig, RetryPolicy, SymmetricKey, TuConfig};
use crate::waveform::WaveformConfig;

/// Label for keys derived when a unit has none configured. Such keys are
/// predictable and only suitable for local runs.
pub const DEMO_KEY_LABEL: &str = "voltmon-demo-unit";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitKey {
    pub unit_id: u16,
    /// Hex-encoded 32-byte key; a demo key is derived from the id when absent.
    pub key: Option<SymmetricKey>,
}

impl UnitKey {
    pub fn resolve(&self) -> SymmetricKey {
        self.key
            .clone()
            .unwrap_or_else(|| SymmetricKey::derive(DEMO_KEY_LABEL, self.unit_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFault {
    pub unit_id: u16,
    #[serde(flatten)]
    pub fault: FileFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoltStarSection {
    pub data_addr: SocketAddr,
    pub broadcast_addr: SocketAddr,
    pub storage_dir: PathBuf,
    /// Key for files at rest; a fresh random key is used when absent.
    pub storage_key: Option<SymmetricKey>,
    pub units: Vec<UnitKey>,
    pub rows_per_file: usize,
    /// Files each TU sends before stopping; unlimited when absent.
    pub max_files: Option<u32>,
    pub pacing: bool,
    pub retry: RetryPolicy,
    pub max_payload: usize,
    pub waveform: WaveformConfig,
    pub detector: DetectorConfig,
    pub faults: Vec<UnitFault>,
}

impl Default for VoltStarSection {
    fn default() -> Self {
        Self {
            data_addr: SocketAddr::from(([127, 0, 0, 1], 7400)),
            broadcast_addr: SocketAddr::from(([127, 0, 0, 1], 7401)),
            storage_dir: PathBuf::from("voltstar-store"),
            storage_key: None,
            units: (0..10).map(|unit_id| UnitKey { unit_id, key: None }).collect(),
            rows_per_file: 2000,
            max_files: Some(10),
            pacing: true,
            retry: RetryPolicy::default(),
            max_payload: crate::voltstar::frame::DEFAULT_MAX_PAYLOAD,
            waveform: WaveformConfig::default(),
            detector: DetectorConfig::default(),
            faults: Vec::new(),
        }
    }
}

impl VoltStarSection {
    pub fn unit_keys(&self) -> BTreeMap<u16, SymmetricKey> {
        self.units.iter().map(|u| (u.unit_id, u.resolve())).collect()
    }

    pub fn mu_config(&self) -> MuConfig {
        MuConfig {
            data_addr: self.data_addr,
            broadcast_addr: self.broadcast_addr,
            unit_keys: self.unit_keys(),
            storage_key: self.storage_key.clone().unwrap_or_else(SymmetricKey::generate),
            storage_dir: self.storage_dir.clone(),
            detector: self.detector.clone(),
            max_payload: self.max_payload,
        }
    }

    /// TU settings for `unit_id`; its samples use the configured seed plus the id.
    pub fn tu_config(&self, unit_id: u16) -> Result<TuConfig, ConfigError> {
        let unit = self
            .units
            .iter()
            .find(|u| u.unit_id == unit_id)
            .ok_or_else(|| ConfigError::Invalid(format!("unit {unit_id} has no key entry")))?;
        let mut cfg = TuConfig::new(unit_id, self.data_addr, unit.resolve());
        cfg.waveform = self
            .waveform
            .clone()
            .with_seed(self.waveform.seed.wrapping_add(u64::from(unit_id)));
        cfg.rows_per_file = self.rows_per_file;
        cfg.max_files = self.max_files;
        cfg.broadcast_addr = Some(self.broadcast_addr);
        cfg.pacing = self.pacing;
        cfg.retry = self.retry.clone();
        cfg.faults = self
            .faults
            .iter()
            .filter(|f| f.unit_id == unit_id)
            .map(|f| f.fault)
            .collect();
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub voltstar: VoltStarSection,
    pub voltchain: VoltChainConfig,
    pub bench: BenchParams,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        text.parse()
    }

    /// Sets the seed of every sample source and of the benchmark.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.voltstar.waveform.seed = seed;
        self.voltchain.waveform.seed = seed;
        self.bench.seed = seed;
        self
    }

    pub fn without_pacing(mut self) -> Self {
        self.voltstar.pacing = false;
        self.bench.pacing = false;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let mu = self.voltstar.mu_config();
        mu.validate().map_err(|e| invalid(&e))?;
        for u in &self.voltstar.units {
            self.voltstar.tu_config(u.unit_id)?.validate().map_err(|e| invalid(&e))?;
        }
        if let Some(f) = self.voltstar.faults.iter().find(|f| !mu.unit_keys.contains_key(&f.unit_id)) {
            return Err(ConfigError::Invalid(format!("fault targets unknown unit {}", f.unit_id)));
        }
        let mut chain = self.voltchain.clone();
        chain.chain.network_size = chain.peers;
        chain.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}

impl std::str::FromStr for Config {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
