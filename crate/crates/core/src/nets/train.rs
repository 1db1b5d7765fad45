//! Training loops for the refiner and the regressor.
//!
//! Both loops are sequential over optimizer steps. Data preparation within a
//! step runs on the rayon pool, but every draw is keyed by its own derived seed
//! so results do not depend on the thread count.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cnr::{Cnr, CnrConfig};
use super::codec::encode_label;
use super::refiner::Refiner;
use crate::augment::{augment, standardize_and_crop, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::patch::Patch;
use crate::perceptual::{AtnLoss, AtnObjective};
use crate::rng::{derive_seed, rng, stream_seed};

/// Draws augmented crops from a fixed pool of patches.
#[derive(Debug, Clone)]
pub struct PatchStream<'a> {
    pub patches: &'a [Patch],
    pub augment: AugmentConfig,
    pub is_real: bool,
    pub seed: u64,
}

impl<'a> PatchStream<'a> {
    pub fn new(patches: &'a [Patch], augment: AugmentConfig, is_real: bool, seed: u64) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::Data("patch stream is empty".into()));
        }
        augment.validate()?;
        Ok(PatchStream {
            patches,
            augment,
            is_real,
            seed,
        })
    }

    /// The `n`-th draw: a uniformly chosen patch with fresh augmentation.
    pub fn draw(&self, n: u64) -> Result<Patch> {
        let pick = rng(derive_seed(stream_seed(self.seed, "pick"), n)).random_range(0..self.patches.len());
        let aug_seed = derive_seed(stream_seed(self.seed, "augment"), n);
        augment(&self.patches[pick], &self.augment, self.is_real, aug_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 means only at the end.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        RefinerTrainConfig {
            steps: 10_000,
            batch_size: 256,
            learning_rate: 0.001,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl RefinerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: AtnLoss,
}

pub const REFINER_HISTORY_HEADER: &str = "step,total,feature,style,reg";

pub fn refiner_history_csv(history: &[StepRecord]) -> String {
    let mut s = format!("{REFINER_HISTORY_HEADER}\n");
    for r in history {
        let l = r.loss;
        s.push_str(&format!("{},{},{},{},{}\n", r.step, l.total, l.feature, l.style, l.reg));
    }
    s
}

/// Where training stopped early because the loss went non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RefinerRun {
    /// Final weights, or the last weights that produced a finite loss.
    pub model: Refiner<f32>,
    pub history: Vec<StepRecord>,
    pub divergence: Option<Divergence>,
}

/// Called with `(completed_steps, model, history)`.
pub type RefinerCheckpointFn<'f> = dyn FnMut(usize, &Refiner<f32>, &[StepRecord]) -> Result<()> + 'f;

/// Minimise the refiner objective on synthetic inputs with style targets drawn
/// from `real`. Steps are numbered from 1 in the history.
pub fn train_refiner(
    mut model: Refiner<f32>,
    synthetic: &PatchStream,
    real: &PatchStream,
    objective: &AtnObjective<f32>,
    config: &RefinerTrainConfig,
    mut on_checkpoint: Option<&mut RefinerCheckpointFn>,
) -> Result<RefinerRun> {
    config.validate()?;
    let mut adam = Adam::new(config.learning_rate, config.adam);
    let mut history = Vec::with_capacity(config.steps);
    let b = config.batch_size;
    let mut last_good = model.clone();
    for step in 1..=config.steps {
        let base = ((step - 1) * b) as u64;
        let pairs: Vec<(Patch, Patch)> = (0..b as u64)
            .into_par_iter()
            .map(|k| Ok((synthetic.draw(base + k)?, real.draw(base + k)?)))
            .collect::<Result<_>>()?;
        let mut loss = AtnLoss::default();
        let mut finite = true;
        for (x, ys) in &pairs {
            let targets = objective.targets(&x.pixels, &ys.pixels)?;
            let (y_hat, tape) = model.forward_tape(&x.pixels)?;
            let (l, g) = objective.loss_and_grad(&y_hat, &targets)?;
            if !l.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                finite = false;
                break;
            }
            loss.add_scaled(&l, 1.0 / b as f64);
            model.backward(&tape, &g, false);
        }
        if !finite {
            return Ok(RefinerRun {
                model: last_good,
                history,
                divergence: Some(Divergence {
                    step,
                    message: format!("non-finite refiner loss at step {step}"),
                }),
            });
        }
        last_good.clone_from(&model);
        adam.step(model.params_mut(), 1.0 / b as f64);
        history.push(StepRecord { step, loss });
        if let Some(cb) = on_checkpoint.as_mut() {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.steps {
                cb(step, &model, &history)?;
            }
        }
    }
    if let Some(cb) = on_checkpoint.as_mut() {
        cb(config.steps, &model, &history)?;
    }
    Ok(RefinerRun {
        model,
        history,
        divergence: None,
    })
}

/// Refine one standardized patch; the label is carried over unchanged.
pub fn refine_patch(model: &Refiner<f32>, patch: &Patch) -> Result<Patch> {
    let pixels = model.forward(&patch.pixels)?;
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("refiner produced non-finite output".into()));
    }
    Ok(Patch {
        pixels,
        spacing_mm: patch.spacing_mm,
        label: patch.label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for validation MSE.
    pub val_fraction: f64,
    /// Apply random augmentation to training inputs; otherwise only
    /// standardize and crop.
    pub augment: bool,
    /// Draw new augmentations every epoch. When false each sample keeps one
    /// augmentation (and refinement) for the whole run, which is much cheaper
    /// when a refiner is attached.
    pub augment_per_epoch: bool,
    /// Stop when validation MSE has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for CnrTrainConfig {
    fn default() -> Self {
        CnrTrainConfig {
            epochs: 40,
            batch_size: 256,
            learning_rate: 0.001,
            seed: 0,
            val_fraction: 0.1,
            augment: true,
            augment_per_epoch: true,
            early_stop_patience: None,
            adam: AdamConfig::default(),
        }
    }
}

impl CnrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    /// `None` when nothing was held out.
    pub val_mse: Option<f64>,
}

pub const CNR_HISTORY_HEADER: &str = "epoch,train_mse,val_mse";

pub fn cnr_history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{CNR_HISTORY_HEADER}\n");
    for r in history {
        let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, val));
    }
    s
}

#[derive(Debug, Clone)]
pub struct CnrRun {
    pub model: Cnr<f32>,
    pub history: Vec<EpochRecord>,
}

/// Inputs and targets for one regressor sample.
fn prepare(
    patch: &Patch,
    augment_cfg: &AugmentConfig,
    random: bool,
    seed: u64,
    refiner: Option<&Refiner<f32>>,
) -> Result<(Array2<f32>, Array1<f32>)> {
    let p = if random {
        augment(patch, augment_cfg, false, seed)?
    } else {
        standardize_and_crop(patch, augment_cfg.crop_size_px)?
    };
    let p = match refiner {
        Some(r) => refine_patch(r, &p)?,
        None => p,
    };
    let label = p
        .label
        .ok_or_else(|| Error::Data("regressor training patch has no label".into()))?;
    let target = Array1::from_iter(encode_label(&label).iter().map(|&v| v as f32));
    Ok((p.pixels, target))
}

fn sample_mse(model: &Cnr<f32>, x: &Array2<f32>, t: &Array1<f32>) -> Result<f64> {
    let y = model.forward(x)?;
    Ok(y.iter().zip(t).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / t.len() as f64)
}

/// Train the regressor with MSE on encoded labels. `refiner`, when given, is
/// applied after augmentation so the regressor sees refined appearance.
pub fn train_cnr(
    model_config: &CnrConfig,
    config: &CnrTrainConfig,
    augment_cfg: &AugmentConfig,
    dataset: &[Patch],
    refiner: Option<&Refiner<f32>>,
) -> Result<CnrRun> {
    config.validate()?;
    augment_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("regressor dataset is empty".into()));
    }
    if let Some(i) = dataset.iter().position(|p| p.label.is_none()) {
        return Err(Error::Data(format!("patch {i} has no label")));
    }
    if augment_cfg.crop_size_px != model_config.input_size {
        return Err(Error::Config(format!(
            "crop size {} differs from regressor input {}",
            augment_cfg.crop_size_px, model_config.input_size
        )));
    }
    let mut model = Cnr::<f32>::new(model_config, stream_seed(config.seed, "init"))?;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng(stream_seed(config.seed, "split")));
    let n_val = ((dataset.len() as f64) * config.val_fraction).floor() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();

    let val_seed = stream_seed(config.seed, "val");
    let val: Vec<_> = val_idx
        .par_iter()
        .map(|&i| prepare(&dataset[i], augment_cfg, config.augment, derive_seed(val_seed, i as u64), refiner))
        .collect::<Result<_>>()?;

    let aug_seed = stream_seed(config.seed, "augment");
    let prepare_epoch = |epoch: usize| -> Result<Vec<(Array2<f32>, Array1<f32>)>> {
        let s = derive_seed(aug_seed, epoch as u64);
        train_idx
            .par_iter()
            .map(|&i| prepare(&dataset[i], augment_cfg, config.augment, derive_seed(s, i as u64), refiner))
            .collect()
    };
    let mut fixed = None;

    let mut adam = Adam::new(config.learning_rate, config.adam);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut shuffle_rng = rng(stream_seed(config.seed, "shuffle"));
    for epoch in 1..=config.epochs {
        let fresh;
        let data = if config.augment_per_epoch {
            fresh = prepare_epoch(epoch)?;
            &fresh
        } else {
            if fixed.is_none() {
                fixed = Some(prepare_epoch(0)?);
            }
            fixed.as_ref().unwrap()
        };
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for batch in perm.chunks(config.batch_size) {
            let scale = 1.0 / (batch.len() * 8) as f32;
            for &j in batch {
                let (x, t) = &data[j];
                let (y, tape) = model.forward_tape(x)?;
                let diff = &y - t;
                sum += diff.iter().map(|&d| (d as f64).powi(2)).sum::<f64>() / 8.0;
                let dy = diff.mapv(|d| 2.0 * d * scale);
                model.backward(&tape, &dy);
            }
            adam.step(model.params_mut(), 1.0);
        }
        let train_mse = sum / data.len() as f64;
        if !train_mse.is_finite() {
            return Err(Error::Numerical(format!("non-finite regressor loss in epoch {epoch}")));
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            let s: f64 = val.iter().map(|(x, t)| sample_mse(&model, x, t)).sum::<Result<f64>>()?;
            Some(s / val.len() as f64)
        };
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if let (Some(patience), Some(v)) = (config.early_stop_patience, val_mse) {
            if v < best {
                best = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok(CnrRun { model, history })
}
