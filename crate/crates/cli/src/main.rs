use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use voltmon::bench::{emit_results, run_experiment, verdicts, ExperimentId, ExperimentSpec};
use voltmon::chainledger::{calibrate_schedule, table1_observations, TABLE1_GAS, TABLE1_NETWORK_SIZE};
use voltmon::config::Config;
use voltmon::voltchain::VoltChainSim;
use voltmon::voltstar::{mu_serve, tu_run};

#[derive(Parser)]
#[command(name = "voltmon", version, about = "Voltage monitoring simulator and benchmark harness")]
struct Cli {
    /// TOML config file; built-in defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for benchmark results.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Generate samples as fast as possible instead of at the serial line rate.
    #[arg(long, global = true)]
    no_pacing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (e1, e2, e3, e4) or `all`, then write CSVs and a summary.
    Run { experiment: String },
    /// Fit the gas schedule to the published policy-size table and show residuals.
    CalibrateGas,
    /// Centralised mode.
    Voltstar {
        #[command(subcommand)]
        role: VoltStarRole,
    },
    /// Decentralised mode.
    Voltchain {
        #[command(subcommand)]
        role: VoltChainRole,
    },
}

#[derive(Subcommand)]
enum VoltStarRole {
    /// Run the Master Unit.
    Serve {
        /// Stop after this many seconds; runs until killed when absent.
        #[arg(long)]
        duration: Option<u64>,
    },
    /// Run one Transfer Unit.
    Tu {
        #[arg(long)]
        unit: u16,
    },
}

#[derive(Subcommand)]
enum VoltChainRole {
    /// Simulate every Processing Unit of the network in this process.
    Node {
        #[arg(long, default_value_t = 10)]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        files_per_step: usize,
    },
}

fn load(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.no_pacing {
        cfg = cfg.without_pacing();
    }
    Ok(cfg)
}

fn run(cfg: &Config, experiment: &str, out: &Path) -> Result<()> {
    let ids: Vec<ExperimentId> = if experiment.eq_ignore_ascii_case("all") {
        ExperimentId::ALL.to_vec()
    } else {
        vec![experiment.parse()?]
    };
    let mut rows = Vec::new();
    for id in ids {
        let spec = ExperimentSpec::new(id, cfg.bench.clone())?;
        let start = Instant::now();
        rows.extend(run_experiment(&spec).with_context(|| format!("{id} failed"))?);
        info!("{id} finished in {:.1?}", start.elapsed());
    }
    let files = emit_results(&rows, out)?;
    print!("{}", std::fs::read_to_string(&files.summary)?);
    for path in files.csv.iter().chain([&files.summary]) {
        println!("wrote {}", path.display());
    }
    if verdicts(&rows).iter().any(|v| !v.passed()) {
        bail!("some trend checks failed");
    }
    Ok(())
}

fn calibrate() -> Result<()> {
    let c = calibrate_schedule(&table1_observations())?;
    println!("fit: gas = {:.3} + {:.3} * k", c.fit.intercept, c.fit.slope);
    let s = c.schedule;
    println!("schedule: g_base {} g_hash {} g_addr {}", s.g_base, s.g_hash, s.g_addr);
    println!("{:>3} {:>9} {:>9} {:>9}", "k", "table", "model", "rel_err");
    for (k, &observed) in TABLE1_GAS.iter().enumerate() {
        let stored = (k as u64).min(u64::from(TABLE1_NETWORK_SIZE) - k as u64);
        let model = s.registration_gas(1, stored);
        let rel = (model as f64 - observed as f64) / observed as f64;
        println!("{k:>3} {observed:>9} {model:>9} {:>8.4}%", rel * 100.0);
    }
    Ok(())
}

fn serve(cfg: &Config, duration: Option<u64>) -> Result<()> {
    let mu = mu_serve(cfg.voltstar.mu_config())?;
    println!("MU data {} broadcast {} storage {}", mu.data_addr(), mu.broadcast_addr(), mu.storage_dir().display());
    let deadline = duration.map(|d| Instant::now() + Duration::from_secs(d));
    while deadline.is_none_or(|d| Instant::now() < d) {
        thread::sleep(Duration::from_secs(1));
        let s = mu.stats();
        info!(
            "received {} persisted {} broadcasts {} units {:?}",
            s.files_received,
            s.files_persisted,
            s.broadcasts.len(),
            mu.registered_units()
        );
    }
    let s = mu.stop();
    println!(
        "received {} persisted {} duplicates {} auth failures {} malformed {} broadcasts {}",
        s.files_received,
        s.files_persisted,
        s.duplicates,
        s.auth_failures,
        s.malformed,
        s.broadcasts.len()
    );
    for b in &s.broadcasts {
        println!(
            "fault {} window {} {:?} rms {:.3}: delivered to {} units in {:.1?}",
            b.report.file_name,
            b.report.window_index,
            b.report.kind,
            b.report.rms_value,
            b.outcome.delivered,
            b.latency
        );
    }
    Ok(())
}

fn tu(cfg: &Config, unit: u16) -> Result<()> {
    let tc = cfg.voltstar.tu_config(unit)?;
    let limit = tc.max_files;
    let handle = tu_run(tc)?;
    match limit {
        Some(n) => {
            while !handle.wait_until_sent(n as usize, Duration::from_secs(1)) {
                if let Some(f) = handle.failure() {
                    bail!("unit {unit}: {f}");
                }
                info!("unit {unit}: {} of {n} files sent", handle.ledger().sent_count());
            }
        }
        None => loop {
            thread::sleep(Duration::from_secs(5));
            if let Some(f) = handle.failure() {
                bail!("unit {unit}: {f}");
            }
            info!("unit {unit}: {} files acknowledged", handle.ledger().acked_count());
        },
    }
    // Give a fault broadcast for the last file time to arrive.
    thread::sleep(Duration::from_secs(1));
    let faults = handle.received_faults();
    let ledger = handle.stop();
    println!(
        "unit {unit}: generated {} sent {} acknowledged {}",
        ledger.generated_count(),
        ledger.sent_count(),
        ledger.acked_count()
    );
    for f in faults {
        println!("fault from unit {} in {} window {} ({:?})", f.unit_id, f.file_name, f.window_index, f.kind);
    }
    Ok(())
}

fn node(cfg: &Config, steps: u64, files_per_step: usize) -> Result<()> {
    let mut sim = VoltChainSim::new(cfg.voltchain.clone())?;
    for _ in 0..steps {
        let r = sim.step(files_per_step)?;
        println!(
            "tick {} actives {:?}: {} files in {} transactions, {} reports, {} observations",
            r.tick,
            r.actives,
            r.files_uploaded,
            r.transactions,
            r.scan.reports.len(),
            r.observations
        );
        for rep in &r.scan.reports {
            println!("  fault {} window {} {:?} rms {:.3}", rep.file_name, rep.window_index, rep.kind, rep.rms_value);
        }
    }
    let chain = sim.chain().read().unwrap();
    println!(
        "height {} registry {} chain {}",
        chain.height(),
        chain.registry_len(),
        if chain.verify_chain().is_ok() { "valid" } else { "INVALID" }
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load(&cli)?;
    match &cli.command {
        Command::Run { experiment } => run(&cfg, experiment, &cli.out),
        Command::CalibrateGas => calibrate(),
        Command::Voltstar { role: VoltStarRole::Serve { duration } } => serve(&cfg, *duration),
        Command::Voltstar { role: VoltStarRole::Tu { unit } } => tu(&cfg, *unit),
        Command::Voltchain { role: VoltChainRole::Node { steps, files_per_step } } => node(&cfg, *steps, *files_per_step),
    }
}
