//! Metrics JSON-lines logs and CSV plot series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::icod::MetricsRecord;

/// One training-loss line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub seed: u64,
}

pub const METRIC_NAMES: [&str; 4] = ["sr", "spl", "ne", "osr"];

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), source: e }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "{}", serde_json::to_string(row).expect("record serializes")).map_err(|e| io_err(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn metric(r: &MetricsRecord, name: &str) -> f64 {
    match name {
        "sr" => r.sr,
        "spl" => r.spl,
        "ne" => r.ne,
        "osr" => r.osr,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// CSV rows of one series, sorted by (iteration, seed).
fn csv(rows: &mut [(usize, f64, u64)]) -> String {
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.cmp(&b.2)));
    let mut out = String::from("iteration,value,seed\n");
    for (it, v, seed) in rows.iter() {
        // `{}` prints the shortest string that parses back to the same f64
        writeln!(out, "{it},{v},{seed}").unwrap();
    }
    out
}

/// Writes one CSV per (log, metric, split) and one per loss log into `out`.
/// Logs with the same file name from different runs (seeds) share a series.
pub fn emit_plot_data(metrics_logs: &[PathBuf], loss_logs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut series: BTreeMap<String, Vec<(usize, f64, u64)>> = BTreeMap::new();
    for path in metrics_logs {
        let stem = stem(path);
        let records: Vec<MetricsRecord> = read_jsonl(path)?;
        for r in &records {
            for m in METRIC_NAMES {
                series.entry(format!("{stem}.{m}.{}", r.split)).or_default().push((r.iteration, metric(r, m), r.seed));
            }
        }
    }
    for path in loss_logs {
        let stem = stem(path);
        let records: Vec<LossRecord> = read_jsonl(path)?;
        for r in &records {
            series.entry(format!("{stem}.train")).or_default().push((r.iteration, r.loss, r.seed));
        }
    }
    if series.is_empty() {
        return Err(HarnessError::Format("no metrics to plot: the logs are empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = Vec::new();
    for (name, mut rows) in series {
        let path = out.join(format!("{name}.csv"));
        fs::write(&path, csv(&mut rows)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn stem(path: &Path) -> String {
    path.file_name().and_then(|s| s.to_str()).unwrap_or("log").trim_end_matches(".jsonl").to_string()
}

/// Parses a series written by [`emit_plot_data`].
pub fn read_csv(path: &Path) -> Result<Vec<(usize, f64, u64)>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("iteration,value,seed") {
        return Err(HarnessError::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|l| {
            let bad = || HarnessError::Format(format!("{}: bad row `{l}`", path.display()));
            let mut it = l.split(',');
            let (a, b, c) = (it.next().ok_or_else(bad)?, it.next().ok_or_else(bad)?, it.next().ok_or_else(bad)?);
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
        })
        .collect()
}
