//! Line-delimited metric records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: String,
    pub benchmark: String,
    pub metric: String,
    pub value: f64,
    pub step: u64,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(variant: &str, benchmark: &str, metric: &str, value: f64, step: u64, seed: u64) -> Self {
        Self {
            variant: variant.into(),
            benchmark: benchmark.into(),
            metric: metric.into(),
            value,
            step,
            seed,
        }
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![
            MetricRecord::new("full_method", "mcq", "accuracy", 0.25, 10, 3),
            MetricRecord::new("plain_baseline", "navigate", "mean_final_distance", 1.5, 0, 3),
        ];
        write_metrics(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"variant\":\"full_method\",\"benchmark\":\"mcq\""));
        assert_eq!(read_metrics(&p).unwrap(), recs);
    }
}
