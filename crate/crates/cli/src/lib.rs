//! Command-line pipeline around `atn-core`: dataset generation, refiner and
//! regressor training, measurement, biomarkers, survival tables and figures.
//!
//! Every command writes `run.json` next to its outputs with the resolved
//! configuration, its SHA-256, derived seeds and input hashes.

pub mod cohort;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod provenance;
pub mod tables;

pub use commands::run;
