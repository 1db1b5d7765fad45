//! Cox models per biomarker and method, written as a wide results table and a
//! long coefficient table.

use std::path::{Path, PathBuf};

use atn_core::biomarkers::{read_patient_csv, PatientBiomarkerRow};
use atn_core::survival::{cox_fit, read_records, survival_table, write_table, Model, ModelCell, TableRow};
use atn_core::Error;

use super::Ctx;
use crate::error::Result;

pub const TABLE: &str = "table.csv";
pub const COEFFICIENTS: &str = "coefficients.csv";

pub fn survival(ctx: &mut Ctx, clinical: &Path, biomarkers: &[PathBuf]) -> Result<()> {
    ctx.record.input("clinical", clinical)?;
    let records = read_records(clinical)?;
    let opts = ctx.cfg.config.survival.cox.clone();
    let rows: Vec<TableRow> = if biomarkers.is_empty() {
        // the clinical table's own biomarker column
        if records.iter().all(|r| r.biomarker.is_none()) {
            return Err(Error::Data(format!(
                "{}: no biomarker values and no --biomarkers files",
                clinical.display()
            ))
            .into());
        }
        let cells = Model::ALL
            .into_iter()
            .map(|model| ModelCell {
                model,
                fit: cox_fit(&records, &model.covariates(), &opts).map_err(|e| e.to_string()),
            })
            .collect();
        vec![TableRow {
            biomarker: "biomarker".into(),
            method: "input".into(),
            cells,
        }]
    } else {
        let mut all: Vec<PatientBiomarkerRow> = Vec::new();
        for (k, p) in biomarkers.iter().enumerate() {
            ctx.record.input(&format!("biomarkers_{k}"), p)?;
            all.extend(read_patient_csv(p)?);
        }
        let agg = ctx.cfg.config.survival.aggregation.name();
        let rows = survival_table(&records, &all, agg, &opts);
        if rows.is_empty() {
            return Err(Error::Data(format!("no biomarker rows with aggregation `{agg}`")).into());
        }
        rows
    };
    for r in &rows {
        for c in &r.cells {
            if let Err(msg) = &c.fit {
                log::warn!("{} / {} / {}: {msg}", r.biomarker, r.method, c.model.name());
            }
        }
    }
    write_table(&ctx.path(TABLE), &ctx.path(COEFFICIENTS), &rows)?;
    ctx.record.output(TABLE);
    ctx.record.output(COEFFICIENTS);
    ctx.record.metric("rows", rows.len());
    ctx.record.metric(
        "failed_fits",
        rows.iter().flat_map(|r| &r.cells).filter(|c| c.fit.is_err()).count(),
    );
    Ok(())
}
