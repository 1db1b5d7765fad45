//! Run configuration: one TOML file covering every stage, versioned by
//! `schema_version`, with dotted `--set key=value` overrides.
//!
//! Seeds inside sections (`refiner_train.seed`, `cnr_train.seed`) are replaced
//! by streams derived from the top-level `seed`, so a single number pins a run.

use std::path::{Path, PathBuf};

use atn_core::augment::AugmentConfig;
use atn_core::biomarkers::Aggregation;
use atn_core::fwhm::FwhmConfig;
use atn_core::nets::{CnrConfig, CnrTrainConfig, RefinerConfig, RefinerTrainConfig};
use atn_core::patches3d::DiameterMode;
use atn_core::perceptual::{AtnLossConfig, ExtractorConfig, ExtractorVariant};
use atn_core::survival::CoxOptions;
use atn_core::synthgen::{PseudoRealConfig, SynthConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::CohortConfig;
use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming pretrained VGG-16 weights.
pub const WEIGHTS_ENV: &str = "ATN_VGG16_WEIGHTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub patch_size_px: usize,
    pub spacing_mm: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            patch_size_px: 80,
            spacing_mm: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiomarkerSettings {
    pub diameter: DiameterMode,
}

impl Default for BiomarkerSettings {
    fn default() -> Self {
        BiomarkerSettings {
            diameter: DiameterMode::EquivalentArea,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSettings {
    /// Which patient aggregation of the biomarkers enters the models.
    pub aggregation: Aggregation,
    pub cox: CoxOptions,
}

impl Default for SurvivalSettings {
    fn default() -> Self {
        SurvivalSettings {
            aggregation: Aggregation::Mean,
            cox: CoxOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Refiner steps per layer set.
    pub steps: usize,
    /// Synthetic inputs shown in each grid.
    pub samples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { steps: 200, samples: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Worker threads; absent means one per core.
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub pseudoreal: PseudoRealConfig,
    pub augment: AugmentConfig,
    pub extractor: ExtractorConfig,
    pub loss: AtnLossConfig,
    pub refiner: RefinerConfig,
    pub refiner_train: RefinerTrainConfig,
    pub cnr: CnrConfig,
    pub cnr_train: CnrTrainConfig,
    pub fwhm: FwhmConfig,
    pub extraction: ExtractionConfig,
    pub biomarkers: BiomarkerSettings,
    pub survival: SurvivalSettings,
    pub cohort: CohortConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            threads: None,
            synth: SynthConfig::default(),
            pseudoreal: PseudoRealConfig::default(),
            augment: AugmentConfig::default(),
            extractor: ExtractorConfig::default(),
            loss: AtnLossConfig::default(),
            refiner: RefinerConfig::default(),
            refiner_train: RefinerTrainConfig::default(),
            cnr: CnrConfig::default(),
            cnr_train: CnrTrainConfig::default(),
            fwhm: FwhmConfig::default(),
            extraction: ExtractionConfig::default(),
            biomarkers: BiomarkerSettings::default(),
            survival: SurvivalSettings::default(),
            cohort: CohortConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        self.synth.validate()?;
        self.pseudoreal.validate()?;
        self.augment.validate()?;
        self.refiner_train.validate()?;
        self.cnr_train.validate()?;
        self.fwhm.validate()?;
        self.cohort.validate()?;
        if self.extraction.patch_size_px == 0 || !(self.extraction.spacing_mm > 0.0) {
            return Err(CliError::Config("extraction needs a positive size and spacing".into()));
        }
        if self.augment.crop_size_px != self.cnr.input_size {
            return Err(CliError::Config(format!(
                "augment.crop_size_px = {} must equal cnr.input_size = {}",
                self.augment.crop_size_px, self.cnr.input_size
            )));
        }
        Ok(())
    }
}

/// A resolved configuration and its fingerprint.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// SHA-256 of the canonical JSON form of `config`.
    pub sha256: String,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn resolve_paths(config: &mut RunConfig, base: Option<&Path>) {
    if let Some(p) = &config.extractor.weights_path {
        if p.is_relative() {
            if let Some(base) = base {
                config.extractor.weights_path = Some(base.join(p));
            }
        }
    }
    if config.extractor.variant == ExtractorVariant::Vgg16 && config.extractor.weights_path.is_none() {
        if let Some(v) = std::env::var_os(WEIGHTS_ENV) {
            config.extractor.weights_path = Some(PathBuf::from(v));
        }
    }
}

/// Load `path` (or the defaults), apply overrides and the seed flag, resolve
/// paths and validate.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig> {
    let mut table = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingInput(p.to_path_buf()));
            }
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let t: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?;
            if !t.contains_key("schema_version") {
                return Err(CliError::Config(format!("{}: missing `schema_version`", p.display())));
            }
            t
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config = RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::Config(e.message().to_string()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    resolve_paths(&mut config, path.and_then(Path::parent));
    config.validate()?;
    let sha256 = hex::encode(Sha256::digest(serde_json::to_vec(&config)?));
    Ok(LoadedConfig {
        config,
        source: path.map(Path::to_path_buf),
        overrides: overrides.to_vec(),
        sha256,
    })
}
