//! Refiner and regressor training, refinement, and the style-layer ablation.

use std::path::Path;

use atn_core::augment::standardize;
use atn_core::bundle::{read_bundle, write_bundle, Bundle};
use atn_core::nets::checkpoint::{cnr_container, refiner_container};
use atn_core::nets::train::{cnr_history_csv, refiner_history_csv};
use atn_core::nets::{self, load_refiner, refine_patch, PatchStream, Refiner, RefinerRun, RefinerTrainConfig};
use atn_core::perceptual::{build_extractor, AtnLossConfig, AtnObjective, CANONICAL_LAYERS};
use atn_core::Patch;
use rayon::prelude::*;

use super::Ctx;
use crate::error::{CliError, Result};
use crate::plot;

pub const HISTORY: &str = "history.csv";
pub const REFINER: &str = "refiner.atn";
pub const CNR: &str = "cnr.atn";

fn load_patches(ctx: &mut Ctx, role: &str, dir: &Path) -> Result<(Bundle, Vec<Patch>)> {
    ctx.record.input(role, dir)?;
    let b = read_bundle(dir)?;
    let patches = (0..b.len()).map(|i| b.patch(i)).collect();
    Ok((b, patches))
}

/// Train a refiner with the configured loss (or `loss` when given).
fn fit_refiner(
    ctx: &mut Ctx,
    synthetic: &[Patch],
    real: &[Patch],
    loss: &AtnLossConfig,
    train: &RefinerTrainConfig,
    checkpoints: Option<&Path>,
) -> Result<RefinerRun> {
    let c = &ctx.cfg.config;
    let phi = build_extractor(&c.extractor)?;
    let objective = AtnObjective::new(&phi, loss)?;
    let aug = c.augment.clone();
    let refiner_cfg = c.refiner.clone();
    let syn_stream = PatchStream::new(synthetic, aug.clone(), false, ctx.stream("refiner-synthetic"))?;
    let real_stream = PatchStream::new(real, aug, true, ctx.stream("refiner-real"))?;
    let model = Refiner::<f32>::new(&refiner_cfg, ctx.stream("refiner-init"))?;
    let mut train = train.clone();
    train.seed = ctx.stream("refiner-train");
    let mut save = |step: usize, m: &Refiner<f32>, h: &[nets::StepRecord]| -> atn_core::Result<()> {
        if let Some(dir) = checkpoints {
            refiner_container(m, &refiner_history_csv(h)).write(&dir.join(format!("step_{step:06}.atn")))?;
        }
        Ok(())
    };
    let cb: Option<&mut nets::train::RefinerCheckpointFn> = if checkpoints.is_some() { Some(&mut save) } else { None };
    Ok(nets::train_refiner(model, &syn_stream, &real_stream, &objective, &train, cb)?)
}

pub fn train_refiner(ctx: &mut Ctx, synthetic: &Path, real: &Path) -> Result<()> {
    let (_, syn) = load_patches(ctx, "synthetic", synthetic)?;
    let (_, real) = load_patches(ctx, "real", real)?;
    let ckpt = if ctx.cfg.config.refiner_train.checkpoint_every > 0 {
        Some(ctx.mkdir("checkpoints")?)
    } else {
        None
    };
    let loss = ctx.cfg.config.loss.clone();
    let train = ctx.cfg.config.refiner_train.clone();
    let run = fit_refiner(ctx, &syn, &real, &loss, &train, ckpt.as_deref())?;
    let history = refiner_history_csv(&run.history);
    refiner_container(&run.model, &history).write(&ctx.path(REFINER))?;
    ctx.record.output(REFINER);
    ctx.write_text(HISTORY, &history)?;
    if ckpt.is_some() {
        ctx.record.output("checkpoints");
    }
    if let Some(last) = run.history.last() {
        ctx.record.metric("final_total_loss", last.loss.total);
    }
    ctx.record.metric("steps_completed", run.history.len());
    if let Some(d) = run.divergence {
        // the saved model is the last one with a finite loss
        return Err(CliError::Numerical(format!(
            "{}; wrote the last finite model after {} steps",
            d.message,
            run.history.len()
        )));
    }
    Ok(())
}

/// Standardize then refine every patch; labels are carried over.
fn refine_all(model: &Refiner<f32>, patches: &[Patch]) -> Result<Vec<Patch>> {
    Ok(patches
        .par_iter()
        .map(|p| refine_patch(model, &standardize(p)?))
        .collect::<atn_core::Result<Vec<_>>>()?)
}

pub fn refine(ctx: &mut Ctx, model: &Path, input: &Path) -> Result<()> {
    ctx.record.input("model", model)?;
    let refiner = load_refiner(model)?;
    let (bundle, patches) = load_patches(ctx, "input", input)?;
    let refined = refine_all(&refiner, &patches)?;
    let mut extra: Vec<(&str, String)> = vec![("refined", "true".into()), ("standardized", "true".into())];
    if let Some(d) = bundle.manifest.get("domain") {
        extra.push(("domain", d.to_string()));
    }
    write_bundle(&ctx.out, &refined, &extra)?;
    for f in ["manifest.txt", "patches.bin"] {
        ctx.record.output(f);
    }
    if bundle.labels.is_some() {
        ctx.record.output("labels.csv");
    }
    ctx.record.metric("patches", refined.len());
    Ok(())
}

pub fn train_cnr(ctx: &mut Ctx, train: &Path, refiner: Option<&Path>) -> Result<()> {
    let (_, data) = load_patches(ctx, "train", train)?;
    let refiner = match refiner {
        Some(p) => {
            ctx.record.input("refiner", p)?;
            Some(load_refiner(p)?)
        }
        None => None,
    };
    let c = &ctx.cfg.config;
    let (model_cfg, aug) = (c.cnr.clone(), c.augment.clone());
    let mut cfg = c.cnr_train.clone();
    cfg.seed = ctx.stream("cnr-train");
    let run = nets::train_cnr(&model_cfg, &cfg, &aug, &data, refiner.as_ref())?;
    let history = cnr_history_csv(&run.history);
    cnr_container(&run.model, &history).write(&ctx.path(CNR))?;
    ctx.record.output(CNR);
    ctx.write_text(HISTORY, &history)?;
    if let Some(last) = run.history.last() {
        ctx.record.metric("final_train_mse", last.train_mse);
        if let Some(v) = last.val_mse {
            ctx.record.metric("final_val_mse", v);
        }
    }
    ctx.record.metric("refined_inputs", refiner.is_some());
    Ok(())
}

/// Train one refiner per cumulative style-layer set (each set adds the next
/// deeper layer) and render the same synthetic inputs through each.
pub fn ablate_style_layers(ctx: &mut Ctx, synthetic: &Path, real: &Path) -> Result<()> {
    let (_, syn) = load_patches(ctx, "synthetic", synthetic)?;
    let (_, real) = load_patches(ctx, "real", real)?;
    let ab = ctx.cfg.config.ablation.clone();
    if ab.samples == 0 {
        return Err(CliError::Config("ablation.samples must be positive".into()));
    }
    let mut train = ctx.cfg.config.refiner_train.clone();
    train.steps = ab.steps;
    train.checkpoint_every = 0;
    let crop = ctx.cfg.config.augment.crop_size_px;
    let inputs: Vec<Patch> = syn
        .iter()
        .take(ab.samples)
        .map(|p| atn_core::augment::standardize_and_crop(p, crop))
        .collect::<atn_core::Result<_>>()?;
    let scale = 3;
    let tiles = |ps: &[Patch]| -> Vec<image::RgbImage> {
        ps.iter().map(|p| plot::grayscale(&p.pixels, -3.0, 3.0, scale)).collect()
    };
    let mut grid = tiles(&inputs);
    for layer in CANONICAL_LAYERS {
        let loss = AtnLossConfig {
            style_layers: vec![layer.to_string()],
            style_cumulative: true,
            ..ctx.cfg.config.loss.clone()
        };
        log::info!("style layers up to {layer}");
        let run = fit_refiner(ctx, &syn, &real, &loss, &train, None)?;
        if let Some(d) = &run.divergence {
            log::warn!("{layer}: {}", d.message);
        }
        ctx.write_text(&format!("history_{layer}.csv"), &refiner_history_csv(&run.history))?;
        let refined: Vec<Patch> = inputs
            .iter()
            .map(|p| refine_patch(&run.model, p))
            .collect::<atn_core::Result<_>>()?;
        let row = tiles(&refined);
        let name = format!("style_{layer}.png");
        plot::save(&plot::tile(&row, ab.samples, 2), &ctx.path(&name))?;
        ctx.record.output(name);
        grid.extend(row);
    }
    plot::save(&plot::tile(&grid, ab.samples, 2), &ctx.path("ablation_grid.png"))?;
    ctx.record.output("ablation_grid.png");
    Ok(())
}
