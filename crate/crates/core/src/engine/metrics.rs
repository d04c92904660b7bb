use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training episode's log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    #[serde(rename = "L_H")]
    pub l_h: f64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    pub total: f64,
    pub accuracy: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["episode", "L_CE", "L_H", "L_S", "total", "accuracy"]).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a metrics log. An empty log is a data error.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data { index: 0, message: format!("cannot read {}: {e}", path.display()) },
        _ => Error::Format(format!("{}: {e}", path.display())),
    })?;
    let rows = r
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Data { index: i, message: format!("{}: {e}", path.display()) }))
        .collect::<Result<Vec<MetricsRow>>>()?;
    if rows.is_empty() {
        return Err(Error::Data { index: 0, message: format!("{} holds no metrics rows", path.display()) });
    }
    Ok(rows)
}
