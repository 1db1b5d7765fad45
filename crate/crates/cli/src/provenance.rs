//! `run.json`: what a command read, which configuration and seeds it used,
//! and what it wrote. With `--deterministic` no wall-clock fields are written,
//! so repeated runs produce identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};

pub const RUN_RECORD: &str = "run.json";

fn hash_file(path: &Path, h: &mut Sha256) -> Result<()> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != RUN_RECORD) {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of every file under a directory (relative names and
/// contents, in sorted order). Earlier `run.json` records are skipped.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            hash_file(&f, &mut h)?;
        }
    } else {
        hash_file(path, &mut h)?;
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects provenance while a command runs.
#[derive(Debug)]
pub struct RunRecord {
    command: String,
    argv: Vec<String>,
    deterministic: bool,
    started: Instant,
    started_unix: u64,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<Value>,
    outputs: Vec<String>,
    metrics: BTreeMap<String, Value>,
}

impl RunRecord {
    pub fn new(command: &str, argv: Vec<String>, deterministic: bool) -> Self {
        RunRecord {
            command: command.to_string(),
            argv,
            deterministic,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Record an input; it must exist.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        self.inputs.push(json!({
            "role": role,
            "path": path.display().to_string(),
            "sha256": hash_path(path)?,
        }));
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn metric(&mut self, name: &str, value: impl Into<Value>) {
        self.metrics.insert(name.to_string(), value.into());
    }

    pub fn write(&self, out: &Path, config: &LoadedConfig) -> Result<()> {
        let mut v = json!({
            "tool": "atn",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": self.argv,
            "config_source": config.source.as_ref().map(|p| p.display().to_string()),
            "config_overrides": config.overrides,
            "config_sha256": config.sha256,
            "config": serde_json::to_value(&config.config)?,
            "seed": config.config.seed,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "metrics": self.metrics,
            "deterministic": self.deterministic,
        });
        if !self.deterministic {
            v["started_unix"] = json!(self.started_unix);
            v["elapsed_s"] = json!(self.started.elapsed().as_secs_f64());
        }
        let path = out.join(RUN_RECORD);
        let text = serde_json::to_string_pretty(&v)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
