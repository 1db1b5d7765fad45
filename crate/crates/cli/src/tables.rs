//! Per-patch measurement tables and the patch index written by extraction.

use std::path::Path;

use atn_core::bundle::LABEL_HEADER;
use atn_core::{AirwayLabel, Error};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const MEASUREMENTS: &str = "measurements.csv";
pub const INDEX: &str = "index.csv";

/// One measured patch; `label` is absent when the measurement failed.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub id: usize,
    pub label: Option<AirwayLabel>,
    pub status: String,
}

pub fn write_measurements(path: &Path, rows: &[MeasurementRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<&str> = LABEL_HEADER.to_vec();
    header.push("status");
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut rec = vec![r.id.to_string()];
        match &r.label {
            Some(l) => rec.extend([
                l.r_a.to_string(),
                l.r_b.to_string(),
                l.w_a.to_string(),
                l.w_b.to_string(),
                l.c_x.to_string(),
                l.c_y.to_string(),
                l.theta.to_string(),
                (l.has_adjacent as u8).to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 8)),
        }
        rec.push(r.status.clone());
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_measurements(path: &Path) -> Result<Vec<MeasurementRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let bad = |i: usize| Error::Data(format!("{}: bad value in column {i}", path.display()));
        let id: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad(0))?;
        let status = rec.get(9).unwrap_or("").to_string();
        let label = if rec.get(1).is_some_and(|s| !s.is_empty()) {
            let f = |i: usize| -> std::result::Result<f64, Error> {
                rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(i))
            };
            Some(AirwayLabel {
                r_a: f(1)?,
                r_b: f(2)?,
                w_a: f(3)?,
                w_b: f(4)?,
                c_x: f(5)?,
                c_y: f(6)?,
                theta: f(7)?,
                has_adjacent: rec.get(8) == Some("1"),
            })
        } else {
            None
        };
        out.push(MeasurementRow { id, label, status });
    }
    Ok(out)
}

/// Where an extracted patch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: usize,
    pub patient_id: String,
    pub segment_id: u64,
    pub parent_id: Option<u64>,
    pub generation: u32,
    pub arclength_mm: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

pub fn write_index(path: &Path, rows: &[IndexRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let rows = r
        .deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect::<std::result::Result<Vec<IndexRow>, Error>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurements_round_trip_with_failures() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MeasurementRow {
                id: 0,
                label: Some(AirwayLabel::circle(2.0, 0.5)),
                status: "ok".into(),
            },
            MeasurementRow {
                id: 1,
                label: None,
                status: "failed: too few rays".into(),
            },
        ];
        write_measurements(&p, &rows).unwrap();
        assert_eq!(read_measurements(&p).unwrap(), rows);
    }
}
