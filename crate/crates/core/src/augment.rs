//! On-the-fly standardization and augmentation.
//!
//! Order: scale (real patches only) → blur → additive noise (HU) → flips →
//! standardize → centre crop. Labels follow the geometric steps.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{bilinear, center_crop, gaussian_blur, mean_std};
use crate::patch::{wrap_half_turn, AirwayLabel, Patch};
use crate::rng::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_std_hu: f64,
    /// Gaussian blur sigma interval in pixels.
    pub blur_sigma_range: [f64; 2],
    /// Independent flip probability per axis.
    pub flip_prob: f64,
    pub real_scale_range: [f64; 2],
    pub crop_size_px: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std_hu: 25.0,
            blur_sigma_range: [0.5, 0.875],
            flip_prob: 0.2,
            real_scale_range: [0.75, 1.25],
            crop_size_px: 32,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("blur_sigma_range", self.blur_sigma_range),
            ("real_scale_range", self.real_scale_range),
        ];
        for (name, r) in ranges {
            if !(r[0] <= r[1] && r[0] >= 0.0) {
                return Err(Error::Config(format!("{name} {r:?} is empty or negative")));
            }
        }
        if self.real_scale_range[0] <= 0.0 {
            return Err(Error::Config("real_scale_range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be a probability".into()));
        }
        if !(self.noise_std_hu >= 0.0) {
            return Err(Error::Config("noise_std_hu must be >= 0".into()));
        }
        if self.crop_size_px == 0 {
            return Err(Error::Config("crop_size_px must be positive".into()));
        }
        Ok(())
    }
}

/// Zero mean, unit variance per patch.
pub fn standardize(patch: &Patch) -> Result<Patch> {
    Ok(Patch {
        pixels: standardize_pixels(&patch.pixels)?,
        ..patch.clone()
    })
}

pub fn standardize_pixels(pixels: &Array2<f32>) -> Result<Array2<f32>> {
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Standardize("non-finite pixels".into()));
    }
    let (mean, std) = mean_std(pixels);
    if !(std > 0.0) || std <= 1e-12 * mean.abs() {
        return Err(Error::Standardize("patch has zero variance".into()));
    }
    Ok(pixels.mapv(|v| ((v as f64 - mean) / std) as f32))
}

/// Bilinear rescale about the patch centre; borders are replicated.
pub fn scale_about_center(pixels: &Array2<f32>, factor: f64) -> Array2<f32> {
    let (h, w) = pixels.dim();
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(r, c)| {
        bilinear(
            pixels,
            cr + (r as f64 - cr) / factor,
            cc + (c as f64 - cc) / factor,
        ) as f32
    })
}

pub fn flip_label_horizontal(l: &AirwayLabel) -> AirwayLabel {
    AirwayLabel {
        c_x: -l.c_x,
        theta: wrap_half_turn(std::f64::consts::PI - l.theta),
        ..*l
    }
}

pub fn flip_label_vertical(l: &AirwayLabel) -> AirwayLabel {
    AirwayLabel {
        c_y: -l.c_y,
        theta: wrap_half_turn(-l.theta),
        ..*l
    }
}

pub fn scale_label(l: &AirwayLabel, s: f64) -> AirwayLabel {
    AirwayLabel {
        r_a: l.r_a * s,
        r_b: l.r_b * s,
        w_a: l.w_a * s,
        w_b: l.w_b * s,
        c_x: l.c_x * s,
        c_y: l.c_y * s,
        ..*l
    }
}

/// Random draws made by one `augment` call; exposed for tests and logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scale: Option<f64>,
    pub blur_sigma: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

pub fn augment(patch: &Patch, config: &AugmentConfig, is_real: bool, seed: u64) -> Result<Patch> {
    augment_with_draw(patch, config, is_real, seed).map(|(p, _)| p)
}

pub fn augment_with_draw(
    patch: &Patch,
    config: &AugmentConfig,
    is_real: bool,
    seed: u64,
) -> Result<(Patch, AugmentDraw)> {
    config.validate()?;
    let (h, w) = patch.pixels.dim();
    if config.crop_size_px > h || config.crop_size_px > w {
        return Err(Error::Argument(format!(
            "crop {} larger than {h}x{w} patch",
            config.crop_size_px
        )));
    }
    let mut rng = rng(seed);
    let mut pixels = patch.pixels.clone();
    let mut label = patch.label;

    let scale = if is_real {
        let r = config.real_scale_range;
        let s = if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
        pixels = scale_about_center(&pixels, s);
        label = label.map(|l| scale_label(&l, s));
        Some(s)
    } else {
        None
    };

    let r = config.blur_sigma_range;
    let blur_sigma = if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    pixels = gaussian_blur(&pixels, blur_sigma);

    if config.noise_std_hu > 0.0 {
        let n = Normal::new(0.0, config.noise_std_hu).unwrap();
        pixels.mapv_inplace(|v| v + n.sample(&mut rng) as f32);
    }

    let flip_horizontal = rng.random_bool(config.flip_prob);
    let flip_vertical = rng.random_bool(config.flip_prob);
    if flip_horizontal {
        pixels.invert_axis(ndarray::Axis(1));
        label = label.map(|l| flip_label_horizontal(&l));
    }
    if flip_vertical {
        pixels.invert_axis(ndarray::Axis(0));
        label = label.map(|l| flip_label_vertical(&l));
    }
    // invert_axis only flips strides; normalise the memory layout
    let pixels = pixels.as_standard_layout().to_owned();

    let pixels = standardize_pixels(&pixels)?;
    let pixels = center_crop(&pixels, config.crop_size_px);
    Ok((
        Patch {
            pixels,
            spacing_mm: patch.spacing_mm,
            label,
        },
        AugmentDraw {
            scale,
            blur_sigma,
            flip_horizontal,
            flip_vertical,
        },
    ))
}

/// Evaluation-time preparation: standardize then centre crop, no randomness.
pub fn standardize_and_crop(patch: &Patch, crop: usize) -> Result<Patch> {
    let (h, w) = patch.pixels.dim();
    if crop > h || crop > w {
        return Err(Error::Argument(format!("crop {crop} larger than {h}x{w} patch")));
    }
    let pixels = standardize_pixels(&patch.pixels)?;
    Ok(Patch {
        pixels: center_crop(&pixels, crop),
        ..patch.clone()
    })
}
