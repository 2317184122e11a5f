use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::experiments::E1_COMPONENTS;
use super::metrics::{median, MetricRow, Value};
use super::ExperimentId;
use crate::chainledger::TABLE1_GAS;

/// Largest relative deviation from the published table that still passes.
/// Experiment, metric, parameter name and unit.
type GroupKey<'a> = (&'a str, &'a str, &'a str, &'a str);

pub const TABLE1_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictStatus {
    Pass,
    Fail,
    /// Reported for information; not a pass/fail assertion.
    Info,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub experiment: String,
    pub check: String,
    pub status: VerdictStatus,
    pub detail: String,
}

impl Verdict {
    fn new(experiment: &str, check: &str, pass: bool, detail: String) -> Self {
        Self {
            experiment: experiment.to_string(),
            check: check.to_string(),
            status: if pass { VerdictStatus::Pass } else { VerdictStatus::Fail },
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != VerdictStatus::Fail
    }
}

/// Per-parameter values of one metric, in parameter order.
fn series(rows: &[MetricRow], experiment: &str, metric: &str) -> BTreeMap<u64, Vec<f64>> {
    let mut out: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.experiment == experiment && r.metric == metric) {
        out.entry(r.param_value).or_default().push(r.value.as_f64());
    }
    out
}

fn medians(rows: &[MetricRow], experiment: &str, metric: &str) -> Vec<(u64, f64)> {
    series(rows, experiment, metric)
        .into_iter()
        .map(|(p, v)| (p, median(&v).expect("series entries are non-empty")))
        .collect()
}

fn strictly_increasing(m: &[(u64, f64)]) -> bool {
    m.windows(2).all(|w| w[1].1 > w[0].1)
}

fn strictly_decreasing(m: &[(u64, f64)]) -> bool {
    m.windows(2).all(|w| w[1].1 < w[0].1)
}

fn list(m: &[(u64, f64)]) -> String {
    m.iter()
        .map(|(p, v)| if v.fract() == 0.0 { format!("{p}:{v}") } else { format!("{p}:{v:.3}") })
        .collect::<Vec<_>>()
        .join(" ")
}

fn e1(rows: &[MetricRow], out: &mut Vec<Verdict>) {
    let id = ExperimentId::E1Transfer.as_str();
    let star = medians(rows, id, "voltstar_file_time");
    let chain = medians(rows, id, "voltchain_file_time");
    if star.is_empty() && chain.is_empty() {
        return;
    }
    let points: Vec<u64> = star.iter().map(|s| s.0).collect();
    let reps = rows
        .iter()
        .filter(|r| r.experiment == id)
        .map(|r| r.rep)
        .max()
        .map_or(0, |m| m as usize + 1);
    let count = rows.iter().filter(|r| r.experiment == id).count();
    out.push(Verdict::new(
        id,
        "row accounting",
        count == points.len() * 2 * reps,
        format!("{count} rows for {} points x 2 modes x {reps} repetitions", points.len()),
    ));
    let slower = star.len() == chain.len()
        && star.iter().zip(&chain).all(|(s, c)| s.0 == c.0 && c.1 > s.1);
    out.push(Verdict::new(
        id,
        "VoltChain per-file time exceeds VoltStar at every point",
        slower,
        format!("voltstar [{}] voltchain [{}] ms", list(&star), list(&chain)),
    ));
    out.push(Verdict::new(
        id,
        "VoltStar median increases with rows",
        strictly_increasing(&star),
        list(&star),
    ));
    out.push(Verdict::new(
        id,
        "VoltChain median increases with rows",
        strictly_increasing(&chain),
        list(&chain),
    ));
}

fn e2(rows: &[MetricRow], out: &mut Vec<Verdict>) {
    let id = ExperimentId::E2Detect.as_str();
    let end = medians(rows, id, "end_fault_latency");
    if !end.is_empty() {
        out.push(Verdict::new(
            id,
            "single-file end-fault latency increases with rows",
            strictly_increasing(&end),
            format!("[{}] ms", list(&end)),
        ));
        let first = medians(rows, id, "first_window_latency");
        let &(p, e) = end.last().expect("non-empty");
        let f = first.iter().find(|f| f.0 == p);
        let far_below = f.is_some_and(|f| f.1 < e / 2.0);
        out.push(Verdict::new(
            id,
            "first-window fault found far sooner than end fault in the largest file",
            far_below,
            format!("rows {p}: first window {:.3} ms vs end {e:.3} ms", f.map_or(f64::NAN, |f| f.1)),
        ));
    }
    let sweep = medians(rows, id, "sweep_latency");
    if !sweep.is_empty() {
        let scanned = series(rows, id, "sweep_files_scanned");
        let complete = sweep.len() == scanned.len();
        out.push(Verdict::new(
            id,
            "split-stream sweep yields a latency for every file size",
            complete,
            format!("[{}] ms", list(&sweep)),
        ));
        let (p, v) = sweep.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
        out.push(Verdict {
            experiment: id.to_string(),
            check: "minimum split-stream latency".to_string(),
            status: VerdictStatus::Info,
            detail: format!("file_rows {p} at {v:.3} ms"),
        });
    }
}

fn e3(rows: &[MetricRow], out: &mut Vec<Verdict>) {
    let id = ExperimentId::E3GasBatch.as_str();
    let total = medians(rows, id, "total_gas");
    if total.is_empty() {
        return;
    }
    out.push(Verdict::new(
        id,
        "total gas strictly decreases with hashes per transaction",
        strictly_decreasing(&total),
        list(&total),
    ));
    let closed = medians(rows, id, "closed_form_gas");
    out.push(Verdict::new(
        id,
        "total gas equals the closed form at every point",
        total == closed,
        format!("closed form [{}]", list(&closed)),
    ));
    let txs = medians(rows, id, "transactions");
    if let Some(&(h, n)) = txs.last() {
        out.push(Verdict::new(
            id,
            "largest batch is a single transaction",
            n == 1.0,
            format!("hashes_per_tx {h}: {n} transactions"),
        ));
    }
}

fn e4(rows: &[MetricRow], out: &mut Vec<Verdict>) {
    let id = ExperimentId::E4GasPolicy.as_str();
    let gas: BTreeMap<u64, f64> = medians(rows, id, "gas").into_iter().collect();
    let Some(&n) = gas.keys().max() else { return };
    let complete = gas.len() as u64 == n + 1;
    let palindromic = complete && gas.iter().all(|(k, g)| gas[&(n - k)] == *g);
    out.push(Verdict::new(
        id,
        "gas is palindromic in the number of allowed peers",
        palindromic,
        format!("{} sizes 0..={n}", gas.len()),
    ));
    if complete && n as usize == TABLE1_GAS.len() - 1 {
        let worst = gas
            .iter()
            .map(|(&k, &g)| (g - TABLE1_GAS[k as usize] as f64).abs() / TABLE1_GAS[k as usize] as f64)
            .fold(0.0, f64::max);
        out.push(Verdict::new(
            id,
            "reproduces the published table within 0.5%",
            worst < TABLE1_TOLERANCE,
            format!("largest relative deviation {:.4}%", worst * 100.0),
        ));
    }
}

/// Trend verdicts for every experiment present in `rows`.
pub fn verdicts(rows: &[MetricRow]) -> Vec<Verdict> {
    let mut out = Vec::new();
    e1(rows, &mut out);
    e2(rows, &mut out);
    e3(rows, &mut out);
    e4(rows, &mut out);
    out
}

/// Plain-text report: medians with their range over repetitions, then verdicts.
pub fn summarize(rows: &[MetricRow]) -> String {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<Value>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((&r.experiment, &r.metric, &r.param_name, &r.unit))
            .or_default()
            .entry(r.param_value)
            .or_default()
            .push(r.value);
    }
    let mut s = String::new();
    let mut last = "";
    for ((experiment, metric, param, unit), points) in &groups {
        if *experiment != last {
            let _ = writeln!(s, "\n== {experiment} ==");
            last = experiment;
        }
        let _ = writeln!(s, "{metric} ({unit}) by {param}:");
        for (p, values) in points {
            if let [Value::Int(v)] = values.as_slice() {
                let _ = writeln!(s, "  {p:>9}  {v}");
                continue;
            }
            let values: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
            let m = median(&values).expect("non-empty");
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if values.len() == 1 {
                let _ = writeln!(s, "  {p:>9}  {m:.3}");
            } else {
                let _ = writeln!(s, "  {p:>9}  median {m:.3}  range [{lo:.3}, {hi:.3}]  n={}", values.len());
            }
        }
    }
    if rows.iter().any(|r| r.experiment == E1_COMPONENTS) {
        let _ = writeln!(s, "\n{E1_COMPONENTS} splits each VoltChain upload into its phases.");
    }
    let _ = writeln!(s, "\n== verdicts ==");
    for v in verdicts(rows) {
        let tag = match v.status {
            VerdictStatus::Pass => "PASS",
            VerdictStatus::Fail => "FAIL",
            VerdictStatus::Info => "INFO",
        };
        let _ = writeln!(s, "{tag} [{}] {}: {}", v.experiment, v.check, v.detail);
    }
    s.trim_start().to_string()
}
