//! Trajectory records in the five-column NGSIM-style CSV layout.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Required CSV columns, in canonical order.
pub const CSV_COLUMNS: [&str; 5] = ["vehicle_id", "frame_id", "local_x", "local_y", "lane_id"];

/// One vehicle observation at one 10 Hz tick. `local_x` is lateral and
/// `local_y` longitudinal, both in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: i64,
    pub frame_id: i64,
    pub local_x: f64,
    pub local_y: f64,
    pub lane_id: i64,
}

impl TrajectoryRecord {
    pub fn position(&self) -> [f64; 2] {
        [self.local_x, self.local_y]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedRecords {
    /// Sorted by `(vehicle_id, frame_id)`.
    pub records: Vec<TrajectoryRecord>,
    /// Rows dropped for unparsable fields or duplicate keys.
    pub rejected: usize,
}

pub fn load_records(path: &Path) -> Result<LoadedRecords> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file)
}

pub fn read_records(mut reader: impl Read) -> Result<LoadedRecords> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<records>", e))?;
    if text.trim().is_empty() {
        log::warn!("record file is empty");
        return Ok(LoadedRecords::default());
    }
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = csv
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    let mut columns = [0usize; 5];
    let mut missing = Vec::new();
    for (slot, name) in columns.iter_mut().zip(CSV_COLUMNS) {
        match headers.iter().position(|h| h == name) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing column(s) {}; expected header `{}`",
            missing.join(", "),
            CSV_COLUMNS.join(",")
        )));
    }

    let mut out = LoadedRecords::default();
    let mut seen = HashSet::new();
    for (row, result) in csv.records().enumerate() {
        let parsed = result.ok().and_then(|r| {
            let field = |i: usize| r.get(columns[i]);
            Some(TrajectoryRecord {
                vehicle_id: field(0)?.parse().ok()?,
                frame_id: field(1)?.parse().ok()?,
                local_x: field(2)?.parse::<f64>().ok().filter(|v| v.is_finite())?,
                local_y: field(3)?.parse::<f64>().ok().filter(|v| v.is_finite())?,
                lane_id: field(4)?.parse().ok()?,
            })
        });
        match parsed {
            Some(rec) if seen.insert((rec.vehicle_id, rec.frame_id)) => out.records.push(rec),
            Some(rec) => {
                log::warn!(
                    "row {}: duplicate (vehicle_id, frame_id) = ({}, {})",
                    row + 2,
                    rec.vehicle_id,
                    rec.frame_id
                );
                out.rejected += 1;
            }
            None => {
                log::warn!("row {}: malformed record rejected", row + 2);
                out.rejected += 1;
            }
        }
    }
    out.records.sort_by_key(|r| (r.vehicle_id, r.frame_id));
    if out.rejected > 0 {
        log::warn!("{} malformed or duplicate row(s) rejected", out.rejected);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_for(n: usize) -> String {
        let mut s = String::from("vehicle_id,frame_id,local_x,local_y,lane_id\n");
        for f in 0..n {
            s.push_str(&format!("7,{},{:.2},{:.2},2\n", f + 1, 5.5, f as f64 * 1.5));
        }
        s
    }

    #[test]
    fn preserves_row_count() {
        let loaded = read_records(csv_for(80).as_bytes()).unwrap();
        assert_eq!(loaded.records.len(), 80);
        assert_eq!(loaded.rejected, 0);
    }

    #[test]
    fn rejects_non_numeric_row() {
        let text = csv_for(80).replacen("7,5,5.50", "7,5,abc", 1);
        let loaded = read_records(text.as_bytes()).unwrap();
        assert_eq!(loaded.records.len(), 79);
        assert_eq!(loaded.rejected, 1);
    }

    #[test]
    fn empty_input_is_empty_list() {
        let loaded = read_records("".as_bytes()).unwrap();
        assert!(loaded.records.is_empty());
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = read_records("vehicle_id,frame_id,local_x,local_y\n1,1,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("lane_id")));
    }

    #[test]
    fn sorts_and_drops_duplicates() {
        let text = "vehicle_id,frame_id,local_x,local_y,lane_id\n2,1,0,0,1\n1,2,0,0,1\n1,1,0,0,1\n1,1,9,9,1\n";
        let loaded = read_records(text.as_bytes()).unwrap();
        let keys: Vec<_> = loaded.records.iter().map(|r| (r.vehicle_id, r.frame_id)).collect();
        assert_eq!(keys, vec![(1, 1), (1, 2), (2, 1)]);
        assert_eq!(loaded.rejected, 1);
    }
}
