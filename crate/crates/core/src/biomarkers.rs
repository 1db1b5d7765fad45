//! Segmental tapering and volume biomarkers, aggregated per patient.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches3d::{is_biomarker_generation, SegmentSeries, SERIES_STEP_MM};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Arithmetic mean of the measured diameters.
pub fn mean_diameter(series: &SegmentSeries) -> Result<f64> {
    let d: Vec<f64> = series.diameters().into_iter().map(|(_, d)| d).collect();
    if d.is_empty() {
        return Err(Error::Data(format!("segment {} has no diameters", series.segment_id)));
    }
    Ok(mean(&d))
}

/// `(d̄_p − d̄) / d̄_p`: the fractional drop in mean diameter from the parent.
pub fn intertapering(series: &SegmentSeries, parent: &SegmentSeries) -> Result<f64> {
    let dp = mean_diameter(parent)?;
    if dp == 0.0 {
        return Err(Error::Data(format!("parent segment {} has zero mean diameter", parent.segment_id)));
    }
    Ok((dp - mean_diameter(series)?) / dp)
}

/// Ordinary least-squares line `d = m·x + c`.
pub fn fit_line(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::Data(format!("need at least 3 points for a line fit, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("all arclengths are equal".into()));
    }
    let m = sxy / sxx;
    Ok((m, my - m * mx))
}

/// `−m / c` from the least-squares line of diameter against arclength.
pub fn intratapering(series: &SegmentSeries) -> Result<f64> {
    let (m, c) = fit_line(&series.diameters())?;
    if c == 0.0 {
        return Err(Error::Numerical(format!("segment {}: zero intercept", series.segment_id)));
    }
    Ok(-m / c)
}

/// Sum of cross-sectional areas times the 0.5 mm sampling interval.
pub fn segment_volume(series: &SegmentSeries) -> Result<f64> {
    let a = series.areas();
    if a.is_empty() {
        return Err(Error::Data(format!("segment {} has no areas", series.segment_id)));
    }
    Ok(a.iter().sum::<f64>() * SERIES_STEP_MM)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Median,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
        }
    }
}

pub fn aggregate(values: &[f64], mode: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("cannot aggregate zero segments".into()));
    }
    Ok(match mode {
        Aggregation::Mean => mean(values),
        Aggregation::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Biomarker {
    Volume,
    Intertapering,
    Intratapering,
}

impl Biomarker {
    pub const ALL: [Biomarker; 3] = [Biomarker::Volume, Biomarker::Intertapering, Biomarker::Intratapering];

    pub fn name(self) -> &'static str {
        match self {
            Biomarker::Volume => "volume",
            Biomarker::Intertapering => "intertapering",
            Biomarker::Intratapering => "intratapering",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown biomarker `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBiomarkers {
    pub segment_id: u64,
    pub mean_diameter: f64,
    pub parent_mean_diameter: Option<f64>,
    pub intertapering: Option<f64>,
    pub intratapering: Option<f64>,
    pub volume: f64,
}

impl SegmentBiomarkers {
    pub fn get(&self, b: Biomarker) -> Option<f64> {
        match b {
            Biomarker::Volume => Some(self.volume),
            Biomarker::Intertapering => self.intertapering,
            Biomarker::Intratapering => self.intratapering,
        }
    }
}

/// Biomarkers for every generation ≥ 2 segment of one patient and method.
/// Parents are looked up among the same series set; a biomarker that cannot
/// be computed for a segment is left empty.
pub fn segment_biomarkers(series: &[SegmentSeries]) -> Vec<SegmentBiomarkers> {
    let by_id: HashMap<u64, &SegmentSeries> = series.iter().map(|s| (s.segment_id, s)).collect();
    series
        .iter()
        .filter(|s| is_biomarker_generation(s.generation))
        .filter_map(|s| {
            let own = mean_diameter(s).ok()?;
            let volume = segment_volume(s).ok()?;
            let parent = s.parent_id.and_then(|p| by_id.get(&p).copied());
            let parent_mean_diameter = parent.and_then(|p| mean_diameter(p).ok());
            let intertapering = parent.and_then(|p| intertapering(s, p).ok());
            let intratapering = intratapering(s).ok();
            Some(SegmentBiomarkers {
                segment_id: s.segment_id,
                mean_diameter: own,
                parent_mean_diameter,
                intertapering,
                intratapering,
                volume,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientBiomarkerRow {
    pub patient_id: String,
    pub biomarker: String,
    pub method: String,
    pub aggregation: String,
    pub value: f64,
    pub n_segments: usize,
}

pub const PATIENT_HEADER: [&str; 6] = ["patient_id", "biomarker", "method", "aggregation", "value", "n_segments"];

/// One row per biomarker and aggregation mode; biomarkers with no segment
/// value are omitted.
pub fn patient_rows(patient_id: &str, method: &str, segs: &[SegmentBiomarkers]) -> Vec<PatientBiomarkerRow> {
    let mut rows = Vec::new();
    for b in Biomarker::ALL {
        let values: Vec<f64> = segs.iter().filter_map(|s| s.get(b)).collect();
        for mode in [Aggregation::Mean, Aggregation::Median] {
            if let Ok(value) = aggregate(&values, mode) {
                rows.push(PatientBiomarkerRow {
                    patient_id: patient_id.to_string(),
                    biomarker: b.name().to_string(),
                    method: method.to_string(),
                    aggregation: mode.name().to_string(),
                    value,
                    n_segments: values.len(),
                });
            }
        }
    }
    rows
}

pub fn write_patient_csv(path: &Path, rows: &[PatientBiomarkerRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(PATIENT_HEADER).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_patient_csv(path: &Path) -> Result<Vec<PatientBiomarkerRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches3d::SeriesPoint;

    fn series(id: u64, parent: Option<u64>, gen: u32, d: &[f64]) -> SegmentSeries {
        SegmentSeries {
            segment_id: id,
            parent_id: parent,
            generation: gen,
            method: "test".into(),
            points: d
                .iter()
                .enumerate()
                .map(|(i, &v)| SeriesPoint {
                    arclength_mm: 1.0 + 0.5 * i as f64,
                    diameter_mm: Some(v),
                    area_mm2: Some(std::f64::consts::PI * v * v / 4.0),
                })
                .collect(),
        }
    }

    #[test]
    fn intertapering_examples() {
        let p = series(1, None, 1, &[4.0; 5]);
        assert_eq!(intertapering(&series(2, Some(1), 2, &[4.0; 5]), &p).unwrap(), 0.0);
        assert!((intertapering(&series(2, Some(1), 2, &[3.0; 5]), &p).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(
            intertapering(&series(2, Some(1), 2, &[3.0; 5]), &series(1, None, 1, &[0.0; 5])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn intratapering_examples() {
        assert_eq!(intratapering(&series(1, None, 2, &[3.0; 6])).unwrap(), 0.0);
        let mut s = series(1, None, 2, &[0.0; 8]);
        for p in &mut s.points {
            p.diameter_mm = Some(4.0 - 0.1 * p.arclength_mm);
        }
        assert!((intratapering(&s).unwrap() - 0.025).abs() < 1e-12);
        assert!(matches!(intratapering(&series(1, None, 2, &[3.0, 2.0])), Err(Error::Data(_))));
    }

    #[test]
    fn volume_and_aggregation() {
        let mut s = series(1, None, 2, &[1.0; 10]);
        for p in &mut s.points {
            p.area_mm2 = Some(10.0);
        }
        assert_eq!(segment_volume(&s).unwrap(), 50.0);
        assert!((aggregate(&[0.1, 0.3], Aggregation::Mean).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(aggregate(&[0.7], Aggregation::Median).unwrap(), 0.7);
        assert!((aggregate(&[0.0, 0.0, 1.0], Aggregation::Mean).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(aggregate(&[0.0, 0.0, 1.0], Aggregation::Median).unwrap(), 0.0);
        assert!(aggregate(&[], Aggregation::Mean).is_err());
    }

    #[test]
    fn central_generations_dropped() {
        let all = vec![
            series(0, None, 0, &[12.0; 5]),
            series(1, Some(0), 1, &[8.0; 5]),
            series(2, Some(1), 2, &[6.0; 5]),
        ];
        let b = segment_biomarkers(&all);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].segment_id, 2);
        assert!((b[0].intertapering.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(b[0].parent_mean_diameter, Some(8.0));
    }
}
