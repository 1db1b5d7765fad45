//! Patch measurement (regressor or FWHM) and biomarker computation.

use std::collections::BTreeMap;
use std::path::Path;

use atn_core::augment::standardize_and_crop;
use atn_core::biomarkers::{patient_rows, segment_biomarkers, write_patient_csv, PatientBiomarkerRow};
use atn_core::bundle::read_bundle;
use atn_core::fwhm::measure_fwhm;
use atn_core::nets::load_cnr;
use atn_core::patches3d::{assemble_series, write_series_csv, SegmentSeries, SeriesOutcome};
use atn_core::{AirwayLabel, Error, Patch};
use rayon::prelude::*;

use super::Ctx;
use crate::error::Result;
use crate::tables::{read_index, read_measurements, write_measurements, MeasurementRow, MEASUREMENTS};

pub const BIOMARKERS: &str = "biomarkers.csv";
pub const EXCLUDED: &str = "excluded.csv";

fn status_row(id: usize, r: atn_core::Result<AirwayLabel>) -> MeasurementRow {
    match r {
        Ok(l) => MeasurementRow {
            id,
            label: Some(l),
            status: "ok".into(),
        },
        Err(e) => MeasurementRow {
            id,
            label: None,
            status: e.to_string(),
        },
    }
}

/// Write the table and, for labelled inputs, the lumen-radius MAE.
fn finish(ctx: &mut Ctx, rows: &[MeasurementRow], truth: Option<&[AirwayLabel]>) -> Result<()> {
    write_measurements(&ctx.path(MEASUREMENTS), rows)?;
    ctx.record.output(MEASUREMENTS);
    let failed = rows.iter().filter(|r| r.label.is_none()).count();
    ctx.record.metric("patches", rows.len());
    ctx.record.metric("failed", failed);
    if let Some(t) = truth {
        let errs: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.label.map(|l| (l.lumen_radius() - t[r.id].lumen_radius()).abs()))
            .collect();
        if !errs.is_empty() {
            let mae = errs.iter().sum::<f64>() / errs.len() as f64;
            log::info!("lumen radius MAE {mae:.4} mm over {} patches", errs.len());
            ctx.record.metric("lumen_radius_mae_mm", mae);
        }
    }
    Ok(())
}

pub fn measure(ctx: &mut Ctx, model: &Path, input: &Path) -> Result<()> {
    ctx.record.input("model", model)?;
    ctx.record.input("input", input)?;
    let cnr = load_cnr(model)?;
    let bundle = read_bundle(input)?;
    let size = cnr.config.input_size;
    let rows: Vec<MeasurementRow> = (0..bundle.len())
        .into_par_iter()
        .map(|i| {
            let r = standardize_and_crop(&bundle.patch(i), size).and_then(|p| cnr.measure(&p.pixels));
            let r = r.and_then(|d| {
                if d.clamped {
                    Err(Error::Measurement("regressor predicted a non-positive radius".into()))
                } else {
                    Ok(d.label)
                }
            });
            status_row(i, r)
        })
        .collect();
    finish(ctx, &rows, bundle.labels.as_deref())
}

pub fn fwhm(ctx: &mut Ctx, input: &Path) -> Result<()> {
    ctx.record.input("input", input)?;
    let bundle = read_bundle(input)?;
    if bundle.manifest.get("standardized") == Some("true") {
        log::warn!("FWHM thresholds are in HU but this bundle is standardized");
    }
    let cfg = ctx.cfg.config.fwhm.clone();
    let rows: Vec<MeasurementRow> = (0..bundle.len())
        .into_par_iter()
        .map(|i| {
            let p: Patch = bundle.patch(i);
            status_row(i, measure_fwhm(&p, &cfg).map(|m| m.label))
        })
        .collect();
    finish(ctx, &rows, bundle.labels.as_deref())
}

struct Excluded {
    patient_id: String,
    segment_id: u64,
    reason: String,
}

pub fn biomarkers(ctx: &mut Ctx, index: &Path, measurements: &Path, method: &str) -> Result<()> {
    ctx.record.input("index", index)?;
    ctx.record.input("measurements", measurements)?;
    let index = read_index(index)?;
    let by_id: BTreeMap<usize, Option<AirwayLabel>> = read_measurements(measurements)?
        .into_iter()
        .map(|m| (m.id, m.label))
        .collect();
    let mode = ctx.cfg.config.biomarkers.diameter;

    // patient -> segment -> samples, each in index order
    type Samples = Vec<(f64, Option<AirwayLabel>)>;
    let mut patients: BTreeMap<&str, BTreeMap<u64, (Option<u64>, u32, Samples)>> = BTreeMap::new();
    for row in &index {
        let label = by_id.get(&row.id).copied().flatten();
        if !by_id.contains_key(&row.id) {
            log::warn!("patch {} has no measurement row", row.id);
        }
        patients
            .entry(&row.patient_id)
            .or_default()
            .entry(row.segment_id)
            .or_insert_with(|| (row.parent_id, row.generation, Vec::new()))
            .2
            .push((row.arclength_mm, label));
    }

    let series_dir = ctx.mkdir("series")?;
    let mut rows: Vec<PatientBiomarkerRow> = Vec::new();
    let mut excluded = Vec::new();
    for (pid, segs) in &patients {
        let mut built: Vec<SegmentSeries> = Vec::new();
        for (&sid, (parent, generation, samples)) in segs {
            let mut samples = samples.clone();
            samples.sort_by(|a, b| a.0.total_cmp(&b.0));
            match assemble_series(sid, *parent, *generation, method, mode, &samples) {
                SeriesOutcome::Built(s) => built.push(s),
                SeriesOutcome::Excluded { segment_id, reason } => excluded.push(Excluded {
                    patient_id: pid.to_string(),
                    segment_id,
                    reason,
                }),
            }
        }
        let name = format!("series/{pid}.csv");
        write_series_csv(&series_dir.join(format!("{pid}.csv")), &built)?;
        ctx.record.output(name);
        let segs = segment_biomarkers(&built);
        if segs.is_empty() {
            log::warn!("{pid}: no biomarker segments survived");
        }
        rows.extend(patient_rows(pid, method, &segs));
    }
    write_patient_csv(&ctx.path(BIOMARKERS), &rows)?;
    ctx.record.output(BIOMARKERS);

    let path = ctx.path(EXCLUDED);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["patient_id", "segment_id", "reason"])
        .map_err(|e| Error::csv(&path, e))?;
    for e in &excluded {
        w.write_record([e.patient_id.clone(), e.segment_id.to_string(), e.reason.clone()])
            .map_err(|err| Error::csv(&path, err))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    ctx.record.output(EXCLUDED);
    ctx.record.metric("patients", patients.len());
    ctx.record.metric("excluded_segments", excluded.len());
    Ok(())
}
