//! Simulated patient cohort for end-to-end runs.
//!
//! Each patient has a latent disease severity `z ~ N(0, 1)`. Severity dilates
//! the peripheral airways (less narrowing from parent to child and along each
//! segment), lowers lung function and raises the mortality hazard, so the
//! airway biomarkers carry prognostic signal the survival models can find.
//!
//! Layout under the output directory:
//! `clinical.csv`, `truth.csv` and `patients/<id>/{volume.bin, manifest.txt,
//! centerlines.csv}`.

use std::fs;
use std::path::{Path, PathBuf};

use atn_core::patches3d::{
    render_tubes, straight_centerline, write_centerlines, write_volume, Centerline, PhantomIntensities, Tube, Vec3,
    Volume3D,
};
use atn_core::rng::{derive_seed, rng, stream_seed, Rng};
use atn_core::survival::{simulate_survival, write_records, SurvivalRecord};
use atn_core::synthgen::{PseudoRealConfig, SynthConfig};
use atn_core::Error;
use ndarray::{Array3, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CLINICAL: &str = "clinical.csv";
pub const TRUTH: &str = "truth.csv";
pub const PATIENTS: &str = "patients";
pub const CENTERLINES: &str = "centerlines.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub patients: usize,
    pub voxel_spacing_mm: f64,
    /// Background padding around the airway tree.
    pub margin_mm: f64,
    pub supersample: usize,
    /// Render with the pseudo-real appearance (texture and blur) instead of
    /// the clean synthetic intensities.
    pub textured: bool,
    /// Log hazard ratio per unit severity.
    pub severity_log_hazard: f64,
    /// Log hazard ratio per year of age above 70.
    pub age_log_hazard: f64,
    pub baseline_hazard_per_day: f64,
    pub censor_rate_per_day: f64,
    pub fvc_missing_prob: f64,
    pub dlco_missing_prob: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            patients: 40,
            voxel_spacing_mm: 0.6,
            margin_mm: 20.0,
            supersample: 2,
            textured: true,
            severity_log_hazard: 0.8,
            age_log_hazard: 0.03,
            baseline_hazard_per_day: 1.0 / 1200.0,
            censor_rate_per_day: 1.0 / 4000.0,
            fvc_missing_prob: 0.02,
            dlco_missing_prob: 0.09,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients < 2 {
            return Err(CliError::Config("cohort.patients must be at least 2".into()));
        }
        if !(self.voxel_spacing_mm > 0.0 && self.margin_mm >= 0.0 && self.supersample >= 1) {
            return Err(CliError::Config("cohort geometry settings must be positive".into()));
        }
        if !(self.baseline_hazard_per_day > 0.0 && self.censor_rate_per_day >= 0.0) {
            return Err(CliError::Config("cohort hazards must be positive".into()));
        }
        for p in [self.fvc_missing_prob, self.dlco_missing_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CliError::Config(format!("missing probability {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// One simulated patient's airway tree and clinical record.
#[derive(Debug, Clone)]
pub struct Patient {
    pub record: SurvivalRecord,
    pub severity: f64,
    pub tubes: Vec<Tube>,
    pub centerlines: Vec<Centerline>,
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn random_unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 {
            return normalize(v);
        }
    }
}

fn perpendicular(d: Vec3, rng: &mut Rng) -> Vec3 {
    loop {
        let v = random_unit(rng);
        let k = v[0] * d[0] + v[1] * d[1] + v[2] * d[2];
        let p = [v[0] - k * d[0], v[1] - k * d[1], v[2] - k * d[2]];
        if p.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
            return normalize(p);
        }
    }
}

fn tilt(d: Vec3, u: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    normalize([d[0] * c + u[0] * s, d[1] * c + u[1] * s, d[2] * c + u[2] * s])
}

fn point_along(a: Vec3, d: Vec3, len: f64) -> Vec3 {
    [a[0] + d[0] * len, a[1] + d[1] * len, a[2] + d[2] * len]
}

struct Branch {
    id: u64,
    parent: Option<u64>,
    generation: u32,
    start: Vec3,
    dir: Vec3,
    radius: f64,
}

/// Airway tree of three generations (one root, two children, four
/// grandchildren) whose calibre depends on `severity`.
fn grow_tree(severity: f64, rng: &mut Rng) -> (Vec<Tube>, Vec<Centerline>) {
    let taper_per_mm = (0.012 * (1.0 - 0.4 * severity)).clamp(0.003, 0.025);
    let child_ratio = (0.80 + 0.05 * severity).clamp(0.65, 0.95);
    let mut tubes = Vec::new();
    let mut lines = Vec::new();
    let mut queue = vec![Branch {
        id: 1,
        parent: None,
        generation: 1,
        start: [0.0, 0.0, 0.0],
        dir: random_unit(rng),
        radius: rng.random_range(3.4..4.2),
    }];
    let mut next_id = 2;
    while let Some(b) = queue.pop() {
        let len = match b.generation {
            1 => rng.random_range(14.0..18.0),
            2 => rng.random_range(10.0..14.0),
            _ => rng.random_range(8.0..12.0),
        };
        let end = point_along(b.start, b.dir, len);
        let r_end = b.radius * (1.0 - taper_per_mm * len);
        tubes.push(Tube {
            start: b.start,
            end,
            lumen_radius_start: b.radius,
            lumen_radius_end: r_end,
            wall_thickness: 0.12 * b.radius + 0.35,
        });
        lines.push(straight_centerline(b.id, b.parent, b.generation, b.start, end, 0.5));
        if b.generation < 3 {
            let u = perpendicular(b.dir, rng);
            for side in [1.0, -1.0] {
                let angle = side * rng.random_range(25f64..40.0).to_radians();
                let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
                queue.push(Branch {
                    id: next_id,
                    parent: Some(b.id),
                    generation: b.generation + 1,
                    start: end,
                    dir: tilt(b.dir, u, angle),
                    radius: r_end * (child_ratio + jitter),
                });
                next_id += 1;
            }
        }
    }
    lines.sort_by_key(|c| c.segment_id);
    (tubes, lines)
}

pub fn simulate_patient(cfg: &CohortConfig, index: usize, seed: u64) -> Patient {
    let mut rng = rng(derive_seed(stream_seed(seed, "cohort"), index as u64));
    let severity: f64 = rng.sample(StandardNormal);
    let (tubes, centerlines) = grow_tree(severity, &mut rng);
    let age = (70.0 + 8.0 * rng.sample::<f64, _>(StandardNormal)).clamp(45.0, 90.0);
    let gender = rng.random_bool(0.75) as u8 as f64;
    let smoker = rng.random_bool(0.7) as u8 as f64;
    let fvc = 80.0 - 12.0 * severity + 8.0 * rng.sample::<f64, _>(StandardNormal);
    let dlco = 45.0 - 10.0 * severity + 7.0 * rng.sample::<f64, _>(StandardNormal);
    let fvc = (!rng.random_bool(cfg.fvc_missing_prob)).then_some(fvc);
    let dlco = (!rng.random_bool(cfg.dlco_missing_prob)).then_some(dlco);
    let eta = cfg.severity_log_hazard * severity + cfg.age_log_hazard * (age - 70.0);
    let (t, event) = simulate_survival(&[eta], cfg.baseline_hazard_per_day, cfg.censor_rate_per_day, &mut rng)[0];
    Patient {
        record: SurvivalRecord {
            patient_id: format!("P{:03}", index + 1),
            // day resolution, as in clinical follow-up
            time_days: t.ceil().max(1.0),
            event,
            age: age.round(),
            gender,
            smoker,
            fvc: fvc.map(|v| (v * 10.0).round() / 10.0),
            dlco: dlco.map(|v| (v * 10.0).round() / 10.0),
            biomarker: None,
        },
        severity,
        tubes,
        centerlines,
    }
}

/// Separable Gaussian blur along every axis; edges are clamped.
fn blur3(data: &Array3<f32>, sigma_vox: f64) -> Array3<f32> {
    if sigma_vox <= 0.0 {
        return data.clone();
    }
    let r = (3.0 * sigma_vox).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| (v / s) as f32).collect();
    let mut cur = data.clone();
    for axis in 0..3 {
        let mut next = Array3::zeros(cur.dim());
        let n = cur.len_of(Axis(axis)) as isize;
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(next.lanes_mut(Axis(axis))) {
            for i in 0..n {
                let mut acc = 0.0f32;
                for (j, w) in k.iter().enumerate() {
                    let idx = (i + j as isize - r).clamp(0, n - 1);
                    acc += w * src[idx as usize];
                }
                dst[i as usize] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// Correlated Gaussian texture with standard deviation `amplitude`.
fn texture(dim: (usize, usize, usize), sigma_vox: f64, amplitude: f64, rng: &mut Rng) -> Array3<f32> {
    let white = Array3::from_shape_simple_fn(dim, || rng.sample::<f32, _>(StandardNormal));
    let smooth = blur3(&white, sigma_vox);
    let n = smooth.len() as f64;
    let mean = smooth.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (smooth.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let gain = if sd > 0.0 { amplitude / sd } else { 0.0 };
    smooth.mapv(|v| ((v as f64 - mean) * gain) as f32)
}

/// Render a patient's airway tree into a CT-like volume.
pub fn render_patient(
    p: &Patient,
    cfg: &CohortConfig,
    synth: &SynthConfig,
    real: &PseudoRealConfig,
    seed: u64,
) -> Result<Volume3D> {
    let pad = cfg.margin_mm
        + p.tubes
            .iter()
            .map(|t| t.lumen_radius_start.max(t.lumen_radius_end) + t.wall_thickness)
            .fold(0.0, f64::max);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for t in &p.tubes {
        for q in [t.start, t.end] {
            for a in 0..3 {
                lo[a] = lo[a].min(q[a] - pad);
                hi[a] = hi[a].max(q[a] + pad);
            }
        }
    }
    let sp = cfg.voxel_spacing_mm;
    let n = |a: usize| ((hi[a] - lo[a]) / sp).ceil() as usize + 1;
    let dims = (n(2), n(1), n(0));
    let hu = if cfg.textured {
        PhantomIntensities {
            lumen_hu: real.lumen_hu as f32,
            wall_hu: real.wall_hu as f32,
            background_hu: real.parenchyma_hu as f32,
        }
    } else {
        PhantomIntensities {
            lumen_hu: synth.lumen_hu as f32,
            wall_hu: synth.wall_hu as f32,
            background_hu: synth.parenchyma_hu as f32,
        }
    };
    let vol = render_tubes(dims, [sp; 3], lo, &p.tubes, hu, cfg.supersample)?;
    if !cfg.textured {
        return Ok(vol);
    }
    let mut rng = rng(stream_seed(seed, &format!("cohort-texture-{}", p.record.patient_id)));
    let px = synth.pixel_spacing_mm;
    let tex = texture(vol.data.dim(), real.texture_correlation_px * px / sp, real.texture_amplitude_hu, &mut rng);
    let data = blur3(&(&vol.data + &tex), real.psf_sigma_px * px / sp);
    Ok(Volume3D::new(data, vol.spacing, vol.origin)?)
}

pub fn patient_dir(root: &Path, id: &str) -> PathBuf {
    root.join(PATIENTS).join(id)
}

/// Simulate and write the whole cohort. Returns the patients in id order.
pub fn write_cohort(
    out: &Path,
    cfg: &CohortConfig,
    synth: &SynthConfig,
    real: &PseudoRealConfig,
    seed: u64,
) -> Result<Vec<Patient>> {
    cfg.validate()?;
    let patients: Vec<Patient> = (0..cfg.patients).map(|i| simulate_patient(cfg, i, seed)).collect();
    for p in &patients {
        let dir = patient_dir(out, &p.record.patient_id);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let vol = render_patient(p, cfg, synth, real, seed)?;
        write_volume(
            &dir,
            &vol,
            &[
                ("patient_id", p.record.patient_id.clone()),
                ("textured", cfg.textured.to_string()),
            ],
        )?;
        write_centerlines(&dir.join(CENTERLINES), &p.centerlines)?;
        log::info!("rendered {} ({:?} voxels)", p.record.patient_id, vol.dim());
    }
    let records: Vec<SurvivalRecord> = patients.iter().map(|p| p.record.clone()).collect();
    write_records(&out.join(CLINICAL), &records)?;
    let truth = out.join(TRUTH);
    let mut w = csv::Writer::from_path(&truth).map_err(|e| Error::csv(&truth, e))?;
    w.write_record(["patient_id", "severity"]).map_err(|e| Error::csv(&truth, e))?;
    for p in &patients {
        w.write_record([p.record.patient_id.clone(), p.severity.to_string()])
            .map_err(|e| Error::csv(&truth, e))?;
    }
    w.flush().map_err(|e| CliError::io(&truth, e))?;
    Ok(patients)
}

/// Patient ids of a written cohort, in clinical-table order.
pub fn cohort_patients(root: &Path) -> Result<Vec<String>> {
    let clinical = root.join(CLINICAL);
    if !clinical.exists() {
        return Err(CliError::MissingInput(clinical));
    }
    Ok(atn_core::survival::read_records(&clinical)?
        .into_iter()
        .map(|r| r.patient_id)
        .collect())
}
