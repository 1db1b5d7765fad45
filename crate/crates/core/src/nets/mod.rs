//! Refiner and regressor networks, the label codec, checkpoints and training.

pub mod checkpoint;
pub mod cnr;
pub mod codec;
pub mod refiner;
pub mod train;

pub use checkpoint::{load_cnr, load_refiner};
pub use cnr::{Cnr, CnrConfig};
pub use codec::{decode_label, encode_label, Decoded};
pub use refiner::{Refiner, RefinerConfig};
pub use train::{
    refine_patch, train_cnr, train_refiner, CnrRun, CnrTrainConfig, EpochRecord, PatchStream, RefinerRun,
    RefinerTrainConfig, StepRecord,
};

use crate::augment::standardize_and_crop;
use crate::error::Result;
use crate::patch::Patch;

/// Measure a batch of raw patches: standardize, centre crop, regress, decode.
/// Output order follows input order.
pub fn measure(model: &Cnr<f32>, patches: &[Patch]) -> Result<Vec<Decoded>> {
    use rayon::prelude::*;
    patches
        .par_iter()
        .map(|p| {
            let p = standardize_and_crop(p, model.config.input_size)?;
            model.measure(&p.pixels)
        })
        .collect()
}
