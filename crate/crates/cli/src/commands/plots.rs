//! `plot` subcommands.

use std::path::{Path, PathBuf};

use atn_core::augment::standardize_pixels;
use atn_core::bundle::read_bundle;

use super::Ctx;
use crate::error::{CliError, Result};
use crate::plot::{self, Series};
use crate::tables::read_measurements;

const CHART: (u32, u32) = (640, 400);

/// One chart per history file (every value column) plus `loss_all.png` with
/// the first value column of each file, e.g. one curve per learning rate.
pub fn loss(ctx: &mut Ctx, histories: &[PathBuf]) -> Result<()> {
    let mut firsts = Vec::new();
    for (k, h) in histories.iter().enumerate() {
        ctx.record.input(&format!("history_{k}"), h)?;
        let series = plot::read_history(h)?;
        let positive = series.iter().flat_map(|s| &s.points).all(|p| p.1 > 0.0);
        let name = format!("loss_{k}.png");
        plot::save(&plot::line_chart(&series, CHART.0, CHART.1, positive), &ctx.path(&name))?;
        ctx.record.output(name);
        if let Some(first) = series.into_iter().next() {
            firsts.push(Series {
                name: h.display().to_string(),
                points: first.points,
            });
        }
    }
    let positive = firsts.iter().flat_map(|s| &s.points).all(|p| p.1 > 0.0);
    plot::save(&plot::line_chart(&firsts, CHART.0, CHART.1, positive), &ctx.path("loss_all.png"))?;
    ctx.record.output("loss_all.png");
    Ok(())
}

fn shown(pixels: &ndarray::Array2<f32>) -> image::RgbImage {
    match standardize_pixels(pixels) {
        Ok(s) => plot::grayscale(&s, -3.0, 3.0, 3),
        Err(_) => plot::auto_grayscale(pixels, 3),
    }
}

/// Originals on the top row, refined versions below.
pub fn pairs(ctx: &mut Ctx, input: &Path, refined: &Path, count: usize) -> Result<()> {
    ctx.record.input("input", input)?;
    ctx.record.input("refined", refined)?;
    let a = read_bundle(input)?;
    let b = read_bundle(refined)?;
    if a.len() != b.len() {
        return Err(CliError::Core(atn_core::Error::Shape(format!(
            "{} has {} patches but {} has {}",
            input.display(),
            a.len(),
            refined.display(),
            b.len()
        ))));
    }
    let n = count.min(a.len()).max(1);
    let mut tiles: Vec<_> = a.patches[..n].iter().map(shown).collect();
    tiles.extend(b.patches[..n].iter().map(shown));
    plot::save(&plot::tile(&tiles, n, 2), &ctx.path("pairs.png"))?;
    ctx.record.output("pairs.png");
    Ok(())
}

/// Patches with the measured lumen (red) and outer wall (green) ellipses.
pub fn overlay(ctx: &mut Ctx, input: &Path, measurements: &Path, count: usize) -> Result<()> {
    ctx.record.input("input", input)?;
    ctx.record.input("measurements", measurements)?;
    let b = read_bundle(input)?;
    let rows = read_measurements(measurements)?;
    let tiles: Vec<_> = rows
        .iter()
        .filter(|r| r.id < b.len())
        .take(count.max(1))
        .map(|r| plot::overlay(&b.patches[r.id], b.spacing_mm, r.label.as_ref(), 4))
        .collect();
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    plot::save(&plot::tile(&tiles, cols.max(1), 2), &ctx.path("overlay.png"))?;
    ctx.record.output("overlay.png");
    Ok(())
}
