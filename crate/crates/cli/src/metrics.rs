//! Append-only JSON-lines metrics log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    /// Milliseconds since the Unix epoch; the only field that varies between
    /// reruns.
    pub timestamp_ms: u64,
}

impl MetricsRecord {
    pub fn new(experiment: &str, method: &str, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.to_owned(),
            method: method.to_owned(),
            metric: metric.to_owned(),
            value,
            params: BTreeMap::new(),
            timestamp_ms: now_ms(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening metrics log {}", path.display()))?;
        Ok(Self {
            path: path.to_owned(),
            file,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}").with_context(|| format!("writing {}", self.path.display()))?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

/// Plain-text table: one row per (method, metric, params), newest value wins.
pub fn report(records: &[MetricsRecord]) -> String {
    let mut rows: BTreeMap<(String, String, String, String), f64> = BTreeMap::new();
    for r in records {
        let params = serde_json::to_string(&r.params).unwrap_or_default();
        rows.insert((r.experiment.clone(), r.method.clone(), r.metric.clone(), params), r.value);
    }
    let mut out = format!("{:<16} {:<9} {:<22} {:>12}  params\n", "experiment", "method", "metric", "value");
    for ((exp, method, metric, params), value) in rows {
        out.push_str(&format!("{exp:<16} {method:<9} {metric:<22} {value:>12.6}  {params}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::open(&path).unwrap();
        log.append(&MetricsRecord::new("e", "PGDAT", "clean_accuracy", 0.5)).unwrap();
        log.append(&MetricsRecord::new("e", "PGDAT", "robust_accuracy", 0.25).param("attack", "pgd"))
            .unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].params["attack"], "pgd");
        assert!(report(&back).contains("robust_accuracy"));
    }
}
