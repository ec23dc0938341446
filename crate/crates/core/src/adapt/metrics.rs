//! JSON-lines experiment records.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub method: String,
    pub speaker: String,
    pub budget: String,
    pub fold: usize,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
    /// Canonical settings of the producing run.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Appends to `path`, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Mean of `metric` over records matching `method` and `budget`.
pub fn mean_of(records: &[MetricRecord], method: &str, budget: &str, metric: &str) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.method == method && r.budget == budget && r.metric_name == metric)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
