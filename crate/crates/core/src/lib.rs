//! Synthetic airway patch generation, perceptual-loss refinement, airway
//! measurement (learned regressor and FWHM baseline), segmental biomarkers and
//! Cox survival analysis.

pub mod augment;
pub mod biomarkers;
pub mod bundle;
pub mod container;
pub mod error;
pub mod fwhm;
pub mod imgproc;
pub mod nets;
pub mod nn;
pub mod patches3d;
pub mod patch;
pub mod perceptual;
pub mod rng;
pub mod survival;
pub mod synthgen;

pub use error::{Error, ErrorClass, Result};
pub use patch::{AirwayLabel, Patch};
