//! Dataset generation, cohort simulation and centreline patch extraction.

use std::path::{Path, PathBuf};

use atn_core::bundle::write_bundle;
use atn_core::patches3d::{
    extract_patch, orient_segments, read_centerlines, read_volume, sample_arclengths, FILL_HU,
};
use atn_core::synthgen::{generate_dataset, Domain};
use atn_core::{Error, Patch};
use ndarray::Array2;
use rayon::prelude::*;

use super::{require_input, Ctx};
use crate::cohort::{self, CENTERLINES};
use crate::error::Result;
use crate::tables::{write_index, IndexRow, INDEX};

pub const EXCLUDED: &str = "excluded.csv";

fn generate(ctx: &mut Ctx, n: usize, domain: Domain, stream: &str) -> Result<()> {
    let seed = ctx.stream(stream);
    generate_dataset(n, &ctx.cfg.config.synth, &domain, seed, &ctx.out)?;
    for f in ["manifest.txt", "patches.bin", "labels.csv"] {
        ctx.record.output(f);
    }
    ctx.record.metric("patches", n);
    Ok(())
}

pub fn synth_generate(ctx: &mut Ctx, n: usize) -> Result<()> {
    generate(ctx, n, Domain::Synthetic, "synthetic")
}

pub fn pseudoreal_generate(ctx: &mut Ctx, n: usize) -> Result<()> {
    let d = Domain::PseudoReal(ctx.cfg.config.pseudoreal.clone());
    generate(ctx, n, d, "pseudoreal")
}

pub fn simulate_cohort(ctx: &mut Ctx) -> Result<()> {
    let seed = ctx.stream("cohort");
    let c = &ctx.cfg.config;
    let patients = cohort::write_cohort(&ctx.out, &c.cohort, &c.synth, &c.pseudoreal, seed)?;
    ctx.record.output(cohort::CLINICAL);
    ctx.record.output(cohort::TRUTH);
    ctx.record.output(cohort::PATIENTS);
    ctx.record.metric("patients", patients.len());
    ctx.record
        .metric("events", patients.iter().filter(|p| p.record.event).count());
    Ok(())
}

/// A segment or position that produced no patch.
struct Exclusion {
    patient_id: String,
    segment_id: u64,
    arclength_mm: Option<f64>,
    reason: String,
}

fn write_exclusions(path: &Path, rows: &[Exclusion]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["patient_id", "segment_id", "arclength_mm", "reason"])
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.segment_id.to_string(),
            r.arclength_mm.map(|a| a.to_string()).unwrap_or_default(),
            r.reason.clone(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Patches of one patient, appended to `patches`/`index`. A sample whose
/// centre falls outside the volume keeps its index row with a constant fill
/// patch, so it counts as a failed measurement downstream.
fn extract_patient(
    ctx: &Ctx,
    patient_id: &str,
    volume_dir: &Path,
    centerlines: &Path,
    patches: &mut Vec<Patch>,
    index: &mut Vec<IndexRow>,
    excluded: &mut Vec<Exclusion>,
) -> Result<()> {
    let vol = read_volume(volume_dir)?;
    let mut segs = read_centerlines(centerlines)?;
    orient_segments(&mut segs);
    let ex = &ctx.cfg.config.extraction;
    for seg in &segs {
        let positions = sample_arclengths(seg.length());
        if positions.is_empty() {
            excluded.push(Exclusion {
                patient_id: patient_id.to_string(),
                segment_id: seg.segment_id,
                arclength_mm: None,
                reason: "too short after pruning".into(),
            });
            continue;
        }
        let got: Vec<(f64, [f64; 3], Result<Patch>)> = positions
            .par_iter()
            .map(|&s| {
                let (p, t) = seg.at(s);
                (s, p, extract_patch(&vol, p, t, ex.patch_size_px, ex.spacing_mm).map_err(Into::into))
            })
            .collect();
        for (s, p, patch) in got {
            let patch = match patch {
                Ok(patch) => patch,
                Err(e) => {
                    excluded.push(Exclusion {
                        patient_id: patient_id.to_string(),
                        segment_id: seg.segment_id,
                        arclength_mm: Some(s),
                        reason: e.to_string(),
                    });
                    Patch::new(
                        Array2::from_elem((ex.patch_size_px, ex.patch_size_px), FILL_HU),
                        ex.spacing_mm,
                    )
                }
            };
            index.push(IndexRow {
                id: patches.len(),
                patient_id: patient_id.to_string(),
                segment_id: seg.segment_id,
                parent_id: seg.parent_id,
                generation: seg.generation,
                arclength_mm: s,
                x_mm: p[0],
                y_mm: p[1],
                z_mm: p[2],
            });
            patches.push(patch);
        }
    }
    Ok(())
}

pub fn extract_patches(
    ctx: &mut Ctx,
    cohort_dir: Option<PathBuf>,
    single: Option<(PathBuf, PathBuf)>,
    patient_id: &str,
) -> Result<()> {
    let jobs: Vec<(String, PathBuf, PathBuf)> = match (cohort_dir, single) {
        (Some(root), _) => {
            ctx.record.input("cohort", &root)?;
            cohort::cohort_patients(&root)?
                .into_iter()
                .map(|id| {
                    let dir = cohort::patient_dir(&root, &id);
                    let cl = dir.join(CENTERLINES);
                    (id, dir, cl)
                })
                .collect()
        }
        (None, Some((vol, cl))) => {
            ctx.record.input("volume", &vol)?;
            ctx.record.input("centerlines", &cl)?;
            vec![(patient_id.to_string(), vol, cl)]
        }
        (None, None) => {
            return Err(crate::error::CliError::Config(
                "extract-patches needs --cohort or --volume with --centerlines".into(),
            ))
        }
    };
    let mut patches = Vec::new();
    let mut index = Vec::new();
    let mut excluded = Vec::new();
    for (id, dir, cl) in &jobs {
        require_input(dir)?;
        require_input(cl)?;
        extract_patient(ctx, id, dir, cl, &mut patches, &mut index, &mut excluded)?;
        log::info!("{id}: {} patches so far", patches.len());
    }
    if patches.is_empty() {
        return Err(Error::Data("no patches could be extracted".into()).into());
    }
    write_bundle(&ctx.out, &patches, &[("source", "centerlines".to_string())])?;
    write_index(&ctx.path(INDEX), &index)?;
    write_exclusions(&ctx.path(EXCLUDED), &excluded)?;
    for f in ["manifest.txt", "patches.bin", INDEX, EXCLUDED] {
        ctx.record.output(f);
    }
    ctx.record.metric("patients", jobs.len());
    ctx.record.metric("patches", patches.len());
    ctx.record.metric("excluded", excluded.len());
    Ok(())
}
