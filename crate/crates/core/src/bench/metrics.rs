use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{summarize, BenchError};

pub const CSV_HEADER: &str = "experiment,param_name,param_value,metric,value,unit,rep";

/// Gas is an exact integer; timings are floating-point milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Int(u64),
    Float(f64),
}

impl Value {
    pub fn millis(d: Duration) -> Self {
        Value::Float(d.as_secs_f64() * 1e3)
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Value::Int(v) => v as f64,
            Value::Float(v) => v,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:.6}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// Usually an experiment id; supplementary tables use their own name.
    pub experiment: String,
    pub param_name: String,
    pub param_value: u64,
    pub metric: String,
    pub value: Value,
    pub unit: String,
    pub rep: u32,
}

impl MetricRow {
    pub fn new(
        experiment: impl Into<String>,
        param: (&str, u64),
        metric: &str,
        value: Value,
        unit: &str,
        rep: u32,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            param_name: param.0.to_string(),
            param_value: param.1,
            metric: metric.to_string(),
            value,
            unit: unit.to_string(),
            rep,
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.experiment, self.param_name, self.param_value, self.metric, self.value, self.unit, self.rep
        )
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: Vec<PathBuf>,
    pub summary: PathBuf,
}

fn check_field(s: &str) -> Result<(), BenchError> {
    if s.is_empty() || s.contains([',', '\n', '\r', '"']) {
        return Err(BenchError::InvalidSpec(format!("{s:?} is not a valid CSV field")));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), BenchError> {
    fs::write(path, text).map_err(|source| BenchError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `<experiment>.csv` for every experiment present in `rows` and a
/// `summary.txt` with medians and trend verdicts.
pub fn emit_results(rows: &[MetricRow], destination: &Path) -> Result<ReportFiles, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::NoRows);
    }
    for r in rows {
        for field in [&r.experiment, &r.param_name, &r.metric, &r.unit] {
            check_field(field)?;
        }
    }
    fs::create_dir_all(destination).map_err(|source| BenchError::Write {
        path: destination.display().to_string(),
        source,
    })?;
    let mut grouped: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        grouped.entry(&r.experiment).or_default().push(r);
    }
    let mut csv = Vec::new();
    for (experiment, group) in grouped {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for r in group {
            text.push_str(&r.to_csv_line());
            text.push('\n');
        }
        let path = destination.join(format!("{experiment}.csv"));
        write(&path, &text)?;
        csv.push(path);
    }
    let summary = destination.join("summary.txt");
    write(&summary, &summarize(rows))?;
    Ok(ReportFiles { csv, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn values_format_stably() {
        assert_eq!(Value::Int(133_357).to_string(), "133357");
        assert_eq!(Value::Float(1.5).to_string(), "1.500000");
        assert_eq!(Value::millis(Duration::from_micros(1234)).to_string(), "1.234000");
    }

    #[test]
    fn empty_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_results(&[], dir.path()), Err(BenchError::NoRows)));
    }

    #[test]
    fn comma_in_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let row = MetricRow::new("E4-gas-policy", ("a,b", 0), "gas", Value::Int(1), "gas", 0);
        assert!(emit_results(&[row], dir.path()).is_err());
    }
}
