//! Airway parameter sampling and patch rendering.
//!
//! Two appearance models share the same geometry: the clean synthetic model
//! (three flat tissue classes, supersampled edges) and a "pseudo-real" model
//! with correlated parenchymal texture, a smooth intensity ramp, abutting
//! vessels and a blurring point-spread function. The second stands in for real
//! CT patches in desk-scale domain-shift experiments.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::write_bundle;
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, mean_std};
use crate::patch::{pixel_center_mm, AirwayLabel, Patch};
use crate::rng::{derive_seed, rng, stream_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Mean lumen radius interval (mm).
    pub lumen_radius_range: [f64; 2],
    /// Lower wall-thickness bound as `[slope, intercept]` of LR (mm).
    pub wall_thickness_low: [f64; 2],
    /// Upper wall-thickness bound as `[slope, intercept]` of LR (mm).
    pub wall_thickness_high: [f64; 2],
    pub center_jitter_std: f64,
    pub adjacent_prob: f64,
    /// Minor/major radius ratio interval.
    pub ellipsoidness_range: [f64; 2],
    /// Adjacent airway lumen radius as a multiple of LR.
    pub adjacent_radius_factor: [f64; 2],
    pub patch_size_px: usize,
    pub pixel_spacing_mm: f64,
    pub lumen_hu: f64,
    pub wall_hu: f64,
    pub parenchyma_hu: f64,
    /// Subsamples per pixel side used for edge antialiasing.
    pub supersample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lumen_radius_range: [0.3, 6.0],
            wall_thickness_low: [0.1, 0.2],
            wall_thickness_high: [0.3, 0.8],
            center_jitter_std: 1.0,
            adjacent_prob: 0.4,
            ellipsoidness_range: [0.9, 1.0],
            adjacent_radius_factor: [0.75, 1.25],
            patch_size_px: 80,
            pixel_spacing_mm: 0.5,
            lumen_hu: -1000.0,
            wall_hu: 0.0,
            parenchyma_hu: -800.0,
            supersample: 4,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("lumen_radius", self.lumen_radius_range)?;
        check_range("ellipsoidness", self.ellipsoidness_range)?;
        check_range("adjacent_radius_factor", self.adjacent_radius_factor)?;
        if self.lumen_radius_range[0] <= 0.0 {
            return Err(Error::Config("lumen radius must be positive".into()));
        }
        if self.ellipsoidness_range[0] <= 0.0 || self.ellipsoidness_range[1] > 1.0 {
            return Err(Error::Config("ellipsoidness must lie in (0, 1]".into()));
        }
        for lr in self.lumen_radius_range {
            let (lo, hi) = self.wall_bounds(lr);
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!(
                    "wall thickness bounds [{lo}, {hi}] empty at LR = {lr}"
                )));
            }
        }
        check_prob("adjacent_prob", self.adjacent_prob)?;
        if !(self.center_jitter_std >= 0.0) {
            return Err(Error::Config("center_jitter_std must be >= 0".into()));
        }
        if self.patch_size_px == 0 || self.patch_size_px % 2 != 0 {
            return Err(Error::Config(format!(
                "patch_size_px = {} must be even and positive",
                self.patch_size_px
            )));
        }
        if !(self.pixel_spacing_mm > 0.0) {
            return Err(Error::Config("pixel_spacing_mm must be positive".into()));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be >= 1".into()));
        }
        Ok(())
    }

    /// Wall-thickness interval for a mean lumen radius.
    pub fn wall_bounds(&self, lr: f64) -> (f64, f64) {
        (
            self.wall_thickness_low[0] * lr + self.wall_thickness_low[1],
            self.wall_thickness_high[0] * lr + self.wall_thickness_high[1],
        )
    }

    fn half_extent_mm(&self) -> f64 {
        self.patch_size_px as f64 * self.pixel_spacing_mm / 2.0
    }
}

/// Appearance parameters of the pseudo-real domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoRealConfig {
    pub lumen_hu: f64,
    pub wall_hu: f64,
    pub parenchyma_hu: f64,
    pub texture_amplitude_hu: f64,
    pub texture_correlation_px: f64,
    /// Peak-to-centre amplitude of the linear intensity ramp.
    pub gradient_max_hu: f64,
    pub vessel_prob: f64,
    pub vessel_hu: f64,
    /// Vessel radius as a multiple of LR.
    pub vessel_radius_factor: [f64; 2],
    pub psf_sigma_px: f64,
}

impl Default for PseudoRealConfig {
    fn default() -> Self {
        PseudoRealConfig {
            lumen_hu: -1000.0,
            wall_hu: -50.0,
            parenchyma_hu: -850.0,
            texture_amplitude_hu: 60.0,
            texture_correlation_px: 2.0,
            gradient_max_hu: 100.0,
            vessel_prob: 0.3,
            vessel_hu: 40.0,
            vessel_radius_factor: [0.6, 1.2],
            psf_sigma_px: 0.7,
        }
    }
}

impl PseudoRealConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("vessel_prob", self.vessel_prob)?;
        check_range("vessel_radius_factor", self.vessel_radius_factor)?;
        if self.texture_amplitude_hu < 0.0
            || self.texture_correlation_px < 0.0
            || self.gradient_max_hu < 0.0
            || self.psf_sigma_px < 0.0
        {
            return Err(Error::Config("pseudo-real amplitudes must be >= 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Draw one airway label. Deterministic in `seed`.
pub fn sample_label(config: &SynthConfig, seed: u64) -> Result<AirwayLabel> {
    config.validate()?;
    let mut rng = rng(seed);
    let lr = uniform(&mut rng, config.lumen_radius_range);
    let (lo, hi) = config.wall_bounds(lr);
    let thickness = uniform(&mut rng, [lo, hi]);
    let ratio = uniform(&mut rng, config.ellipsoidness_range);
    let jitter = Normal::new(0.0, config.center_jitter_std)
        .map_err(|e| Error::Config(format!("center jitter: {e}")))?;
    let c_x = jitter.sample(&mut rng);
    let c_y = jitter.sample(&mut rng);
    let theta = rng.random_range(0.0..PI);
    let has_adjacent = rng.random_bool(config.adjacent_prob);

    // LR is the mean of the two lumen radii; the wall thickness is added to both axes.
    let r_a = 2.0 * lr / (1.0 + ratio);
    let r_b = ratio * r_a;
    Ok(AirwayLabel {
        r_a,
        r_b,
        w_a: r_a + thickness,
        w_b: r_b + thickness,
        c_x,
        c_y,
        theta,
        has_adjacent,
    })
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
}

impl Shape {
    fn ellipse(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Shape::Ellipse {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                cos,
                sin,
            } => {
                let dx = x - cx;
                let dy = y - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

/// Distance from an ellipse centre to its boundary along direction `phi`.
pub fn ellipse_radius_at(a: f64, b: f64, theta: f64, phi: f64) -> f64 {
    let d = phi - theta;
    1.0 / ((d.cos() / a).powi(2) + (d.sin() / b).powi(2)).sqrt()
}

/// First matching region wins; unmatched points take `background`.
fn render_scene(
    regions: &[(Shape, f64)],
    background: f64,
    size: usize,
    spacing: f64,
    supersample: usize,
) -> Array2<f32> {
    let ss = supersample as f64;
    let mut out = Array2::<f32>::zeros((size, size));
    for ((row, col), px) in out.indexed_iter_mut() {
        let (x0, y0) = pixel_center_mm(size, size, spacing, row, col);
        let mut acc = 0.0;
        for si in 0..supersample {
            let y = y0 + ((si as f64 + 0.5) / ss - 0.5) * spacing;
            for sj in 0..supersample {
                let x = x0 + ((sj as f64 + 0.5) / ss - 0.5) * spacing;
                acc += regions
                    .iter()
                    .find(|(s, _)| s.contains(x, y))
                    .map_or(background, |(_, v)| *v);
            }
        }
        *px = (acc / (ss * ss)) as f32;
    }
    out
}

fn check_fits(label: &AirwayLabel, config: &SynthConfig) -> Result<()> {
    label.validate().map_err(|e| Error::Render(e.to_string()))?;
    let (s, c) = label.theta.sin_cos();
    let hx = (label.w_a.powi(2) * c * c + label.w_b.powi(2) * s * s).sqrt();
    let hy = (label.w_a.powi(2) * s * s + label.w_b.powi(2) * c * c).sqrt();
    let half = config.half_extent_mm();
    if label.c_x.abs() + hx > half || label.c_y.abs() + hy > half {
        return Err(Error::Render(format!(
            "outer radius W_A = {:.3} mm at centre ({:.3}, {:.3}) exceeds the {:.1} mm patch half-extent",
            label.w_a, label.c_x, label.c_y, half
        )));
    }
    Ok(())
}

/// A disc of radius `r` tangent to the outer wall at direction `phi`.
fn tangent_disc(label: &AirwayLabel, phi: f64, r: f64) -> (f64, f64) {
    let d = ellipse_radius_at(label.w_a, label.w_b, label.theta, phi) + r;
    (label.c_x + d * phi.cos(), label.c_y + d * phi.sin())
}

fn airway_regions(
    label: &AirwayLabel,
    config: &SynthConfig,
    lumen_hu: f64,
    wall_hu: f64,
    seed: u64,
) -> Vec<(Shape, f64)> {
    let mut regions = vec![
        (
            Shape::ellipse(label.c_x, label.c_y, label.r_a, label.r_b, label.theta),
            lumen_hu,
        ),
        (
            Shape::ellipse(label.c_x, label.c_y, label.w_a, label.w_b, label.theta),
            wall_hu,
        ),
    ];
    if label.has_adjacent {
        let mut rng = rng(stream_seed(seed, "adjacent"));
        let lr = label.lumen_radius();
        let factor = uniform(&mut rng, config.adjacent_radius_factor);
        let lumen = factor * lr;
        let outer = lumen + factor * label.wall_thickness();
        let phi = rng.random_range(0.0..2.0 * PI);
        let (cx, cy) = tangent_disc(label, phi, outer);
        regions.push((Shape::Circle { cx, cy, r: lumen }, lumen_hu));
        regions.push((Shape::Circle { cx, cy, r: outer }, wall_hu));
    }
    regions
}

/// Render the clean synthetic appearance of `label`.
pub fn render_patch(label: &AirwayLabel, config: &SynthConfig, seed: u64) -> Result<Patch> {
    config.validate()?;
    check_fits(label, config)?;
    let regions = airway_regions(label, config, config.lumen_hu, config.wall_hu, seed);
    let pixels = render_scene(
        &regions,
        config.parenchyma_hu,
        config.patch_size_px,
        config.pixel_spacing_mm,
        config.supersample,
    );
    Ok(Patch::new(pixels, config.pixel_spacing_mm).with_label(*label))
}

/// Zero-mean Gaussian field with the given correlation length, scaled to `amplitude` std.
fn correlated_texture(size: usize, correlation_px: f64, amplitude: f64, rng: &mut Rng) -> Array2<f32> {
    let n = Normal::new(0.0f64, 1.0).unwrap();
    let white = Array2::from_shape_fn((size, size), |_| n.sample(rng) as f32);
    let mut field = gaussian_blur(&white, correlation_px);
    let (mean, std) = mean_std(&field);
    let scale = if std > 0.0 { amplitude / std } else { 0.0 };
    field.mapv_inplace(|v| ((v as f64 - mean) * scale) as f32);
    field
}

/// Render `label` with the pseudo-real appearance model.
pub fn render_pseudoreal(
    label: &AirwayLabel,
    config: &SynthConfig,
    domain: &PseudoRealConfig,
    seed: u64,
) -> Result<Patch> {
    config.validate()?;
    domain.validate()?;
    check_fits(label, config)?;
    let mut rng = rng(stream_seed(seed, "pseudoreal"));
    let mut regions = airway_regions(label, config, domain.lumen_hu, domain.wall_hu, seed);
    if rng.random_bool(domain.vessel_prob) {
        let r = uniform(&mut rng, domain.vessel_radius_factor) * label.lumen_radius();
        let phi = rng.random_range(0.0..2.0 * PI);
        let (cx, cy) = tangent_disc(label, phi, r);
        regions.push((Shape::Circle { cx, cy, r }, domain.vessel_hu));
    }
    let size = config.patch_size_px;
    let mut pixels = render_scene(
        &regions,
        domain.parenchyma_hu,
        size,
        config.pixel_spacing_mm,
        config.supersample,
    );

    let texture = correlated_texture(
        size,
        domain.texture_correlation_px,
        domain.texture_amplitude_hu,
        &mut rng,
    );
    let ramp_dir = rng.random_range(0.0..2.0 * PI);
    let ramp_amp = rng.random_range(0.0..=domain.gradient_max_hu);
    let half = size as f64 / 2.0;
    for ((row, col), px) in pixels.indexed_iter_mut() {
        let u = ((col as f64 + 0.5 - half) * ramp_dir.cos() + (row as f64 + 0.5 - half) * ramp_dir.sin())
            / half;
        *px += texture[[row, col]] + (ramp_amp * u) as f32;
    }
    let pixels = gaussian_blur(&pixels, domain.psf_sigma_px);
    Ok(Patch::new(pixels, config.pixel_spacing_mm).with_label(*label))
}

fn item_seeds(seed: u64, i: usize) -> (u64, u64) {
    (
        derive_seed(stream_seed(seed, "label"), i as u64),
        derive_seed(stream_seed(seed, "render"), i as u64),
    )
}

/// Which appearance model a dataset is rendered with.
#[derive(Debug, Clone)]
pub enum Domain {
    Synthetic,
    PseudoReal(PseudoRealConfig),
}

/// Generate `n` labelled patches in memory. Item `i` depends only on `(config, seed, i)`.
pub fn generate_patches(n: usize, config: &SynthConfig, domain: &Domain, seed: u64) -> Result<Vec<Patch>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be >= 1".into()));
    }
    config.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (ls, rs) = item_seeds(seed, i);
            let label = sample_label(config, ls)?;
            match domain {
                Domain::Synthetic => render_patch(&label, config, rs),
                Domain::PseudoReal(d) => render_pseudoreal(&label, config, d, rs),
            }
        })
        .collect()
}

/// Generate and write a dataset bundle to `out`.
pub fn generate_dataset(n: usize, config: &SynthConfig, domain: &Domain, seed: u64, out: &Path) -> Result<()> {
    let patches = generate_patches(n, config, domain, seed)?;
    let name = match domain {
        Domain::Synthetic => "synthetic",
        Domain::PseudoReal(_) => "pseudoreal",
    };
    write_bundle(out, &patches, &[("domain", name.to_string()), ("seed", seed.to_string())])
}
