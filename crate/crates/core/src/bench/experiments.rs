use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use log::info;

use super::metrics::{median, MetricRow, Value};
use super::{BenchError, ExperimentId, ExperimentSpec};
use crate::castore::ContentHash;
use crate::chainledger::{
    calibrate_schedule, canonicalize_policy, estimate_gas, table1_observations, AccessPolicy, ChainConfig,
    ChainState, TxKind,
};
use crate::detector::{first_anomaly_in_csv, DetectorConfig};
use crate::voltchain::{UploadTiming, VoltChainConfig, VoltChainSim};
use crate::voltstar::{mu_serve, tu_run, MuConfig, RetryPolicy, SymmetricKey, TuConfig};
use crate::waveform::{generate_samples, write_rows, FaultSpec, WaveformConfig};

pub const E1_COMPONENTS: &str = "E1-components";

type Phase = fn(&UploadTiming) -> Duration;

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<MetricRow>, BenchError> {
    match spec.id {
        ExperimentId::E1Transfer => run_e1_transfer(spec),
        ExperimentId::E2Detect => run_e2_detect(spec),
        ExperimentId::E3GasBatch => run_e3_gas_batch(spec),
        ExperimentId::E4GasPolicy => run_e4_gas_policy(spec),
    }
}

fn check_id(spec: &ExperimentSpec, id: ExperimentId) -> Result<(), BenchError> {
    if spec.id != id {
        return Err(BenchError::InvalidSpec(format!("expected a {id} spec, got {}", spec.id)));
    }
    spec.validate()
}

fn rep_seed(seed: u64, rep: u32) -> u64 {
    seed.wrapping_add(u64::from(rep) * 1_000_003)
}

fn median_ms(times: &[Duration]) -> f64 {
    let ms: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    median(&ms).unwrap_or(0.0)
}

/// Per-file TU to MU transfer times for one repetition.
fn voltstar_transfer(spec: &ExperimentSpec, rows: usize, rep: u32) -> Result<Vec<Duration>, BenchError> {
    let p = &spec.params;
    let fail = |cause: String| BenchError::Repetition {
        mode: "voltstar",
        rep,
        cause,
    };
    let dir = tempfile::tempdir()?;
    let keys: BTreeMap<u16, SymmetricKey> = (0..p.units).map(|u| (u, SymmetricKey::derive("bench", u))).collect();
    let mu = mu_serve(MuConfig::local(dir.path(), keys.clone()))?;
    let seed = rep_seed(p.seed, rep);
    let tus = keys
        .into_iter()
        .map(|(u, key)| {
            let mut cfg = TuConfig::new(u, mu.data_addr(), key);
            cfg.waveform = WaveformConfig::default().with_seed(seed.wrapping_add(u64::from(u)));
            cfg.rows_per_file = rows;
            cfg.max_files = Some(p.files_per_unit);
            cfg.pacing = p.pacing;
            cfg.retry = RetryPolicy {
                initial_ms: 50,
                max_ms: 1000,
                max_retries: Some(5),
            };
            tu_run(cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let timeout = Duration::from_secs(p.transfer_timeout_s);
    let deadline = Instant::now() + timeout;
    let mut times = Vec::new();
    let mut error = None;
    for tu in tus {
        let left = deadline.saturating_duration_since(Instant::now());
        if error.is_none() && !tu.wait_until_done(left) {
            error = Some(match tu.failure() {
                Some(f) => format!("unit {}: {f}", tu.unit_id()),
                None => format!("unit {} did not finish within {timeout:?}", tu.unit_id()),
            });
        }
        let ledger = tu.stop();
        if error.is_none() && ledger.acked_count() != p.files_per_unit as usize {
            error = Some(format!("only {} of {} files acknowledged", ledger.acked_count(), p.files_per_unit));
        }
        times.extend(ledger.transfer_times());
    }
    let stats = mu.stop();
    if let Some(e) = error {
        return Err(fail(e));
    }
    let expected = usize::from(p.units) * p.files_per_unit as usize;
    if stats.files_persisted as usize != expected {
        return Err(fail(format!("MU persisted {} of {expected} files", stats.files_persisted)));
    }
    Ok(times)
}

/// Per-file upload timings (store add through mined registration) for one
/// repetition. File contents are prepared before timing starts.
fn voltchain_upload(spec: &ExperimentSpec, rows: usize, rep: u32) -> Result<Vec<UploadTiming>, BenchError> {
    let p = &spec.params;
    let cfg = VoltChainConfig {
        peers: p.units,
        rows_per_file: rows,
        chain: ChainConfig {
            difficulty: p.difficulty,
            network_size: p.units,
            ..Default::default()
        },
        waveform: WaveformConfig::default().with_seed(rep_seed(p.seed, rep)),
        ..Default::default()
    };
    let mut sim = VoltChainSim::new(cfg)?;
    let files: Vec<Vec<(String, Vec<u8>)>> = (0..p.units)
        .map(|u| {
            let pu = sim.pu_mut(u)?;
            Ok(pu
                .next_files(p.files_per_unit as usize)
                .iter()
                .map(|f| (f.name(), f.to_csv()))
                .collect())
        })
        .collect::<Result<_, BenchError>>()?;
    let timings: Vec<UploadTiming> = sim.upload_timed_round(&files)?.into_iter().flatten().collect();
    let registered = sim.chain().read().unwrap().registry_len();
    let expected = usize::from(p.units) * p.files_per_unit as usize;
    if registered != expected {
        return Err(BenchError::Repetition {
            mode: "voltchain",
            rep,
            cause: format!("registry holds {registered} of {expected} files"),
        });
    }
    Ok(timings)
}

/// Per-file ingestion time in both modes at every row count. Emits one
/// median per mode, row count and repetition, plus the VoltChain phase
/// breakdown under [`E1_COMPONENTS`].
pub fn run_e1_transfer(spec: &ExperimentSpec) -> Result<Vec<MetricRow>, BenchError> {
    check_id(spec, ExperimentId::E1Transfer)?;
    let id = spec.id.as_str();
    let mut out = Vec::new();
    let mut components = Vec::new();
    for &rows in &spec.params.rows {
        let param = ("rows", rows as u64);
        for rep in 0..spec.params.repetitions {
            // Alternate which mode runs first so neither always sees a warm cache.
            let chain_first = rep % 2 == 1;
            let mut chain = None;
            if chain_first {
                chain = Some(voltchain_upload(spec, rows, rep)?);
            }
            let star = voltstar_transfer(spec, rows, rep)?;
            let chain = match chain {
                Some(c) => c,
                None => voltchain_upload(spec, rows, rep)?,
            };
            let star_ms = median_ms(&star);
            let totals: Vec<Duration> = chain.iter().map(UploadTiming::total).collect();
            let chain_ms = median_ms(&totals);
            info!("E1 rows={rows} rep={rep}: voltstar {star_ms:.3} ms, voltchain {chain_ms:.3} ms");
            out.push(MetricRow::new(id, param, "voltstar_file_time", Value::Float(star_ms), "ms", rep));
            out.push(MetricRow::new(id, param, "voltchain_file_time", Value::Float(chain_ms), "ms", rep));
            let phases: [(&str, Phase); 6] = [
                ("store_add", |t| t.store_add),
                ("replicate", |t| t.replicate),
                ("lock_wait", |t| t.lock_wait),
                ("submit", |t| t.submit),
                ("mine", |t| t.mine),
                ("total", UploadTiming::total),
            ];
            for (name, phase) in phases {
                let v: Vec<Duration> = chain.iter().map(phase).collect();
                components.push(MetricRow::new(
                    E1_COMPONENTS,
                    param,
                    &format!("voltchain_{name}"),
                    Value::Float(median_ms(&v)),
                    "ms",
                    rep,
                ));
            }
        }
    }
    out.extend(components);
    Ok(out)
}

fn end_fault(rows: u64, window: u64) -> FaultSpec {
    let len = rows.min(window);
    FaultSpec::outage(rows - len, len)
}

/// Time to parse and scan `files` in order until the first anomaly.
fn detect_over(files: &[(String, Vec<u8>)], detector: &DetectorConfig) -> Result<(Duration, usize), BenchError> {
    let start = Instant::now();
    for (i, (name, bytes)) in files.iter().enumerate() {
        if first_anomaly_in_csv(0, name, bytes, detector)?.is_some() {
            return Ok((start.elapsed(), i + 1));
        }
    }
    Err(BenchError::InvalidSpec("injected fault was not detected".into()))
}

/// Single-file detection latency with the fault at the end and in the first
/// window, and the latency of finding a fault at the end of a long stream
/// split into files of each swept size.
pub fn run_e2_detect(spec: &ExperimentSpec) -> Result<Vec<MetricRow>, BenchError> {
    check_id(spec, ExperimentId::E2Detect)?;
    let p = &spec.params;
    let id = spec.id.as_str();
    let detector = DetectorConfig::default();
    let window = detector.window_len() as u64;
    let mut out = Vec::new();

    for &rows in &p.rows {
        let n = rows as u64;
        let param = ("rows", n);
        for rep in 0..p.repetitions {
            let wf = WaveformConfig::default().with_seed(rep_seed(p.seed, rep));
            let end = vec![("end.csv".to_string(), write_rows(&generate_samples(&wf, n, &[end_fault(n, window)])?))];
            let first = FaultSpec::outage(0, n.min(window));
            let first = vec![("first.csv".to_string(), write_rows(&generate_samples(&wf, n, &[first])?))];
            // Warm the allocator and caches so the first repetition is not an outlier.
            detect_over(&end, &detector)?;
            let (end_t, _) = detect_over(&end, &detector)?;
            let (first_t, _) = detect_over(&first, &detector)?;
            out.push(MetricRow::new(id, param, "end_fault_latency", Value::millis(end_t), "ms", rep));
            out.push(MetricRow::new(id, param, "first_window_latency", Value::millis(first_t), "ms", rep));
        }
    }

    let total = p.total_points;
    for rep in 0..p.repetitions {
        let wf = WaveformConfig::default().with_seed(rep_seed(p.seed, rep));
        let stream = generate_samples(&wf, total, &[end_fault(total, window)])?;
        for &size in &p.split_sizes {
            let files: Vec<(String, Vec<u8>)> = stream
                .chunks(size)
                .enumerate()
                .map(|(i, chunk)| (format!("u0_f{i}.csv"), write_rows(chunk)))
                .collect();
            let (t, scanned) = detect_over(&files, &detector)?;
            let param = ("file_rows", size as u64);
            out.push(MetricRow::new(id, param, "sweep_latency", Value::millis(t), "ms", rep));
            out.push(MetricRow::new(id, param, "sweep_files_scanned", Value::Int(scanned as u64), "files", rep));
        }
    }
    Ok(out)
}

/// Registers `total_hashes` hashes on a fresh ledger for every batching
/// factor and sums the gas of the mined transactions.
pub fn run_e3_gas_batch(spec: &ExperimentSpec) -> Result<Vec<MetricRow>, BenchError> {
    check_id(spec, ExperimentId::E3GasBatch)?;
    let p = &spec.params;
    let id = spec.id.as_str();
    let mut out = Vec::new();
    for &h in &p.hashes_per_tx {
        let config = ChainConfig {
            difficulty: p.difficulty,
            network_size: p.network_size,
            ..Default::default()
        };
        let schedule = config.schedule;
        let mut chain = ChainState::new(config)?;
        let entries: Vec<(String, ContentHash)> = (0..p.total_hashes)
            .map(|i| {
                let name = format!("u0_f{i}.csv");
                let hash = ContentHash::of(name.as_bytes());
                (name, hash)
            })
            .collect();
        for group in entries.chunks(h) {
            let kind = TxKind::RegisterFiles {
                entries: group.to_vec(),
                policy: AccessPolicy::open(p.network_size),
            };
            chain.submit_tx(0, kind)?;
        }
        let height = chain.mine_block()?.index;
        let block = &chain.blocks()[height as usize];
        let total_gas: u64 = block.transactions.iter().map(|t| estimate_gas(&t.kind, &schedule)).sum();
        let txs = block.transactions.len() as u64;
        let closed_form = (p.total_hashes.div_ceil(h) as u64) * schedule.g_base + p.total_hashes as u64 * schedule.g_hash;
        let param = ("hashes_per_tx", h as u64);
        out.push(MetricRow::new(id, param, "total_gas", Value::Int(total_gas), "gas", 0));
        out.push(MetricRow::new(id, param, "closed_form_gas", Value::Int(closed_form), "gas", 0));
        out.push(MetricRow::new(id, param, "transactions", Value::Int(txs), "tx", 0));
    }
    Ok(out)
}

/// Gas of a single-hash registration readable by the first `k` peers, for
/// every swept `k`, under the schedule fitted to the published table.
pub fn run_e4_gas_policy(spec: &ExperimentSpec) -> Result<Vec<MetricRow>, BenchError> {
    check_id(spec, ExperimentId::E4GasPolicy)?;
    let p = &spec.params;
    let schedule = calibrate_schedule(&table1_observations())?.schedule;
    let hash = ContentHash::of(b"u0_f0.csv");
    p.policy_sizes
        .iter()
        .map(|&k| {
            let kind = TxKind::RegisterFiles {
                entries: vec![("u0_f0.csv".to_string(), hash)],
                policy: canonicalize_policy(0..k, p.network_size)?,
            };
            let gas = estimate_gas(&kind, &schedule);
            Ok(MetricRow::new(
                spec.id.as_str(),
                ("allowed_peers", u64::from(k)),
                "gas",
                Value::Int(gas),
                "gas",
                0,
            ))
        })
        .collect()
}
