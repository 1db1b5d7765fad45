//! 2D patches and the seven-parameter airway label.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two ellipses sharing centre and rotation, plus the adjacent-airway flag.
///
/// Radii and centre offsets are in millimetres; the centre is measured from
/// the patch centre with `x` along columns and `y` along rows. `theta` is the
/// angle of the major axis from `+x` towards `+y`, in `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirwayLabel {
    pub r_a: f64,
    pub r_b: f64,
    pub w_a: f64,
    pub w_b: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub theta: f64,
    pub has_adjacent: bool,
}

impl AirwayLabel {
    /// Circular airway centred in the patch.
    pub fn circle(lumen_radius: f64, wall_thickness: f64) -> Self {
        AirwayLabel {
            r_a: lumen_radius,
            r_b: lumen_radius,
            w_a: lumen_radius + wall_thickness,
            w_b: lumen_radius + wall_thickness,
            c_x: 0.0,
            c_y: 0.0,
            theta: 0.0,
            has_adjacent: false,
        }
    }

    /// Mean lumen radius `(R_A + R_B) / 2`.
    pub fn lumen_radius(&self) -> f64 {
        0.5 * (self.r_a + self.r_b)
    }

    /// Mean wall thickness: mean outer radius minus mean inner radius.
    pub fn wall_thickness(&self) -> f64 {
        0.5 * (self.w_a + self.w_b) - self.lumen_radius()
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.r_a, self.r_b, self.w_a, self.w_b, self.c_x, self.c_y, self.theta,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite label {self:?}")));
        }
        if !(self.r_b > 0.0 && self.r_b <= self.r_a) {
            return Err(Error::Data(format!(
                "lumen radii must satisfy 0 < R_B <= R_A (R_A={}, R_B={})",
                self.r_a, self.r_b
            )));
        }
        if !(self.w_a > self.r_a && self.w_b > self.r_b && self.w_b <= self.w_a) {
            return Err(Error::Data(format!(
                "outer radii must enclose lumen with W_B <= W_A (W_A={}, W_B={})",
                self.w_a, self.w_b
            )));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.theta) {
            return Err(Error::Data(format!("theta {} outside [0, pi)", self.theta)));
        }
        Ok(())
    }
}

/// Wrap an angle into `[0, π)`.
pub fn wrap_half_turn(theta: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let t = theta.rem_euclid(pi);
    // rem_euclid can round up to exactly pi for tiny negative inputs
    if t >= pi {
        0.0
    } else {
        t
    }
}

/// A single-channel image with square pixels of `spacing_mm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Array2<f32>,
    pub spacing_mm: f64,
    pub label: Option<AirwayLabel>,
}

impl Patch {
    pub fn new(pixels: Array2<f32>, spacing_mm: f64) -> Self {
        Patch {
            pixels,
            spacing_mm,
            label: None,
        }
    }

    pub fn with_label(mut self, label: AirwayLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_mm > 0.0) {
            return Err(Error::Data(format!("pixel spacing {} <= 0", self.spacing_mm)));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("patch contains non-finite pixels".into()));
        }
        Ok(())
    }

    /// Physical coordinates (mm) of pixel `(row, col)` relative to the patch centre.
    pub fn pixel_center_mm(&self, row: usize, col: usize) -> (f64, f64) {
        pixel_center_mm(self.height(), self.width(), self.spacing_mm, row, col)
    }
}

pub fn pixel_center_mm(h: usize, w: usize, spacing: f64, row: usize, col: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5 - w as f64 / 2.0) * spacing,
        (row as f64 + 0.5 - h as f64 / 2.0) * spacing,
    )
}
