//! Metrics and timing CSVs.
//!
//! `metrics.csv` holds one row per evaluation and is a pure function of the
//! effective config; wall-clock readings live in `timing.csv` so that reruns
//! stay byte-identical.

use std::fs::{self, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Column order is part of the format; append new columns at the end only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub mean_return: f64,
    pub capture_rate: f64,
    pub epsilon: f64,
    /// Means over the train steps since the previous row; empty before
    /// training starts.
    pub loss_total: Option<f64>,
    pub loss_td: Option<f64>,
    pub group_raw: Option<f64>,
    pub group_reg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: u64,
    pub wallclock_s: f64,
}

/// Appends one record, writing the header if the file is new or empty.
pub fn append_row<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Rewrites `path` with only the rows whose `step` passes `keep`.
pub fn retain_rows<T>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<()>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<T> = read_rows(path)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for row in rows.iter().filter(|r| keep(r)) {
        w.serialize(row)?;
        any = true;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    fs::write(path, if any { bytes } else { Vec::new() })?;
    Ok(())
}
