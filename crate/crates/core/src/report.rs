//! CSV output shared by the experiment commands.
//!
//! Floats are written with 17 significant digits so that a file read back
//! reproduces the values bit for bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::Summary;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One summarized metric of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub config_hash: String,
    pub metric: String,
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl MetricRow {
    pub fn new(experiment: &str, config_hash: &str, metric: &str, s: Summary) -> Self {
        Self {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            metric: metric.to_string(),
            median: s.median,
            lo: s.lo,
            hi: s.hi,
        }
    }
}

pub const METRIC_HEADER: [&str; 6] = ["experiment", "config_hash", "metric", "median", "lo", "hi"];

pub fn write_metrics<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRIC_HEADER)?;
    for r in rows {
        out.write_record([
            r.experiment.clone(),
            r.config_hash.clone(),
            r.metric.clone(),
            fmt_f64(r.median),
            fmt_f64(r.lo),
            fmt_f64(r.hi),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Writes a table of floats under the given header.
pub fn write_table<W: Write>(w: W, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for r in rows {
        out.write_record(r.iter().map(|v| fmt_f64(*v)))?;
    }
    out.flush()?;
    Ok(())
}
