//! Full-width-at-half-maximum baseline with edge-cued, limited ray search,
//! plus a direct least-squares ellipse fit.
//!
//! Along each ray from the lumen seed the search waits for the first clear
//! rise above the running lumen floor (the edge cue) and looks for the wall
//! peak only within `max_wall_extent_mm` of it (the limit). Inner and outer
//! edges are the half-maximum crossings on either side of the peak.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{bilinear, gaussian_blur};
use crate::patch::{wrap_half_turn, AirwayLabel, Patch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-major radius.
    pub a: f64,
    /// Semi-minor radius.
    pub b: f64,
    /// Direction of the major axis in `[0, π)`.
    pub theta: f64,
}

impl Ellipse {
    /// Distance from the centre to the boundary in direction `phi`.
    pub fn radius_at(&self, phi: f64) -> f64 {
        let d = phi - self.theta;
        let (s, c) = d.sin_cos();
        self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt()
    }

    /// Implicit value: < 1 inside, 1 on the boundary.
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Direct least-squares conic fit constrained to ellipses, in the numerically
/// stable partitioned form. Points are normalised before fitting.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<Ellipse> {
    if points.len() < 5 {
        return Err(Error::Fit(format!("need at least 5 points, got {}", points.len())));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Fit("non-finite point".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let scale = (points
        .iter()
        .map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(scale > 0.0) {
        return Err(Error::Fit("points are coincident".into()));
    }

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let (x, y) = ((p.0 - mx) / scale, (p.1 - my) / scale);
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Fit("points are collinear".into()))?;
    if s3.determinant().abs() < 1e-12 * n.powi(3) {
        return Err(Error::Fit("points are collinear".into()));
    }
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by the inverse of the ellipse constraint block
    let m = Matrix3::from_rows(&[
        m.row(2) / 2.0,
        -m.row(1),
        m.row(0) / 2.0,
    ]);

    let mut best: Option<Vector3<f64>> = None;
    for ev in m.complex_eigenvalues().iter() {
        if ev.im.abs() > 1e-9 * ev.re.abs().max(1.0) {
            continue;
        }
        let shifted = m - Matrix3::identity() * ev.re;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Fit("eigenvector solve failed".into()))?;
        let k = svd.singular_values.imin();
        let v: Vector3<f64> = vt.row(k).transpose();
        if 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0 {
            best = Some(v);
            break;
        }
    }
    let a1 = best.ok_or_else(|| Error::Fit("no ellipse solution".into()))?;
    let a2 = t * a1;
    let (a, b, c, d, e, f) = (a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]);

    let q = Matrix2::new(2.0 * a, b, b, 2.0 * c);
    let centre = q
        .try_inverse()
        .ok_or_else(|| Error::Fit("degenerate conic".into()))?
        * nalgebra::Vector2::new(-d, -e);
    let (x0, y0) = (centre[0], centre[1]);
    let f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f;
    let eig = SymmetricEigen::new(Matrix2::new(a, b / 2.0, b / 2.0, c));
    let r: Vec<f64> = eig.eigenvalues.iter().map(|&l| (-f0 / l).sqrt()).collect();
    if r.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Fit("conic is not a real ellipse".into()));
    }
    let major = if r[0] >= r[1] { 0 } else { 1 };
    let v = eig.eigenvectors.column(major);
    Ok(Ellipse {
        center: (mx + scale * x0, my + scale * y0),
        a: scale * r[major],
        b: scale * r[1 - major],
        theta: wrap_half_turn(v[1].atan2(v[0])),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FwhmConfig {
    pub n_rays: usize,
    /// Ray sampling step in pixels.
    pub step_px: f64,
    /// Maximum ray length as a fraction of the patch extent.
    pub max_length_fraction: f64,
    /// Minimum rise of the wall peak over the lumen floor.
    pub min_prominence_hu: f64,
    /// Peak search window beyond the edge cue.
    pub max_wall_extent_mm: f64,
    pub min_valid_fraction: f64,
    /// Re-cast rays from the fitted lumen centre this many times.
    pub recenter_iterations: usize,
    /// Gaussian pre-smoothing (pixels) applied before ray casting; 0 disables.
    pub presmooth_sigma_px: f64,
}

impl Default for FwhmConfig {
    fn default() -> Self {
        FwhmConfig {
            n_rays: 64,
            step_px: 0.25,
            max_length_fraction: 0.45,
            min_prominence_hu: 50.0,
            max_wall_extent_mm: 3.0,
            min_valid_fraction: 0.5,
            recenter_iterations: 2,
            presmooth_sigma_px: 0.0,
        }
    }
}

impl FwhmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rays < 8 {
            return Err(Error::Config(format!("n_rays = {} must be at least 8", self.n_rays)));
        }
        if !(self.step_px > 0.0) || !(self.max_length_fraction > 0.0) || !(self.max_wall_extent_mm > 0.0) {
            return Err(Error::Config("ray step, length and wall extent must be positive".into()));
        }
        if !(self.presmooth_sigma_px >= 0.0) {
            return Err(Error::Config("presmooth_sigma_px must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::Config("min_valid_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Intensities sampled along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub angle: f64,
    /// Sample spacing in mm.
    pub step_mm: f64,
    pub samples: Vec<f64>,
}

impl RayProfile {
    pub fn cast(patch: &Patch, origin: (f64, f64), angle: f64, step_px: f64, length_mm: f64) -> Self {
        let (h, w) = patch.pixels.dim();
        let sp = patch.spacing_mm;
        let step_mm = step_px * sp;
        let n = (length_mm / step_mm).floor() as usize + 1;
        let (s, c) = angle.sin_cos();
        let samples = (0..n)
            .map(|i| {
                let r = i as f64 * step_mm;
                let (x, y) = (origin.0 + r * c, origin.1 + r * s);
                let col = x / sp + w as f64 / 2.0 - 0.5;
                let row = y / sp + h as f64 / 2.0 - 0.5;
                bilinear(&patch.pixels, row, col)
            })
            .collect();
        RayProfile { angle, step_mm, samples }
    }

    /// Inner and outer edge distances (mm), or `None` when no wall peak is found.
    pub fn edges(&self, cfg: &FwhmConfig) -> Option<(f64, f64)> {
        let p = &self.samples;
        // edge cue: first clear rise above the running minimum
        let mut floor = f64::INFINITY;
        let mut floor_idx = 0;
        let mut cue = None;
        for (i, &v) in p.iter().enumerate() {
            if v < floor {
                floor = v;
                floor_idx = i;
            }
            if v >= floor + cfg.min_prominence_hu {
                cue = Some(i);
                break;
            }
        }
        let cue = cue?;
        let window = (cfg.max_wall_extent_mm / self.step_mm).ceil() as usize;
        let end = (cue + window).min(p.len() - 1);
        let (peak_idx, peak) = (cue..=end).map(|i| (i, p[i])).fold((cue, p[cue]), |b, c| if c.1 > b.1 { c } else { b });
        if peak - floor < cfg.min_prominence_hu || peak_idx == p.len() - 1 {
            return None;
        }

        let half_in = 0.5 * (floor + peak);
        let inner = (floor_idx + 1..=peak_idx).find(|&i| p[i] >= half_in).map(|i| {
            let (a, b) = (p[i - 1], p[i]);
            (i - 1) as f64 + (half_in - a) / (b - a)
        })?;

        let out_end = (peak_idx + window).min(p.len() - 1);
        let paren = p[peak_idx..=out_end].iter().copied().fold(f64::INFINITY, f64::min);
        if peak - paren < cfg.min_prominence_hu {
            return None;
        }
        let half_out = 0.5 * (paren + peak);
        let outer = (peak_idx + 1..=out_end).find(|&i| p[i] <= half_out).map(|i| {
            let (a, b) = (p[i - 1], p[i]);
            (i - 1) as f64 + (a - half_out) / (a - b)
        })?;
        Some((inner * self.step_mm, outer * self.step_mm))
    }
}

/// Inner and outer ellipse plus the fraction of rays that found a wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwhmMeasurement {
    pub label: AirwayLabel,
    pub inner: Ellipse,
    pub outer: Ellipse,
    pub valid_ray_fraction: f64,
}

fn cast_all(patch: &Patch, origin: (f64, f64), cfg: &FwhmConfig) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>, f64)> {
    let (h, w) = patch.pixels.dim();
    let length = cfg.max_length_fraction * h.min(w) as f64 * patch.spacing_mm;
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for k in 0..cfg.n_rays {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / cfg.n_rays as f64;
        let ray = RayProfile::cast(patch, origin, phi, cfg.step_px, length);
        if let Some((ri, ro)) = ray.edges(cfg) {
            let (s, c) = phi.sin_cos();
            inner.push((origin.0 + ri * c, origin.1 + ri * s));
            outer.push((origin.0 + ro * c, origin.1 + ro * s));
        }
    }
    let frac = inner.len() as f64 / cfg.n_rays as f64;
    if frac < cfg.min_valid_fraction {
        return Err(Error::Measurement(format!(
            "only {:.0}% of rays found a wall",
            100.0 * frac
        )));
    }
    Ok((inner, outer, frac))
}

/// Lumen seed: the pixel within `radius_mm` of the patch centre from which the
/// most probe rays find a wall; ties go to the darker, then the nearer pixel.
pub fn lumen_seed(patch: &Patch, radius_mm: f64, cfg: &FwhmConfig) -> (f64, f64) {
    let (h, w) = patch.pixels.dim();
    let length = cfg.max_length_fraction * h.min(w) as f64 * patch.spacing_mm;
    let probes = 16;
    let mut best = ((0.0, 0.0), 0usize, f64::INFINITY, f64::INFINITY);
    for ((r, c), &v) in patch.pixels.indexed_iter() {
        let (x, y) = patch.pixel_center_mm(r, c);
        let d = x.hypot(y);
        if d > radius_mm {
            continue;
        }
        let valid = (0..probes)
            .filter(|k| {
                let phi = 2.0 * std::f64::consts::PI * *k as f64 / probes as f64;
                RayProfile::cast(patch, (x, y), phi, cfg.step_px, length).edges(cfg).is_some()
            })
            .count();
        let v = v as f64;
        let better = valid > best.1 || (valid == best.1 && (v < best.2 || (v == best.2 && d < best.3)));
        if better {
            best = ((x, y), valid, v, d);
        }
    }
    best.0
}

pub fn measure_fwhm(patch: &Patch, cfg: &FwhmConfig) -> Result<FwhmMeasurement> {
    cfg.validate()?;
    let smoothed;
    let patch = if cfg.presmooth_sigma_px > 0.0 {
        smoothed = Patch {
            pixels: gaussian_blur(&patch.pixels, cfg.presmooth_sigma_px),
            spacing_mm: patch.spacing_mm,
            label: None,
        };
        &smoothed
    } else {
        patch
    };
    let mut origin = if cfg.recenter_iterations > 0 {
        lumen_seed(patch, 2.5, cfg)
    } else {
        (0.0, 0.0)
    };
    let mut result = None;
    for it in 0..=cfg.recenter_iterations {
        let (inner_pts, outer_pts, frac) = cast_all(patch, origin, cfg)?;
        let inner = fit_ellipse(&inner_pts)?;
        let outer = fit_ellipse(&outer_pts)?;
        result = Some((inner, outer, frac));
        if it < cfg.recenter_iterations {
            if inner.level(origin.0, origin.1) >= 1.0 {
                break;
            }
            origin = inner.center;
        }
    }
    let (inner, outer, frac) = result.expect("at least one pass");
    // outer radii along the inner ellipse's axes
    let w_a = outer.radius_at(inner.theta);
    let w_b = outer.radius_at(inner.theta + std::f64::consts::FRAC_PI_2);
    let label = AirwayLabel {
        r_a: inner.a,
        r_b: inner.b,
        w_a,
        w_b,
        c_x: inner.center.0,
        c_y: inner.center.1,
        theta: inner.theta,
        has_adjacent: false,
    };
    Ok(FwhmMeasurement {
        label,
        inner,
        outer,
        valid_ray_fraction: frac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{render_patch, SynthConfig};
    use std::f64::consts::PI;

    fn ellipse_points(e: &Ellipse, n: usize) -> Vec<(f64, f64)> {
        let (s, c) = e.theta.sin_cos();
        (0..n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / n as f64;
                let (u, v) = (e.a * t.cos(), e.b * t.sin());
                (e.center.0 + c * u - s * v, e.center.1 + s * u + c * v)
            })
            .collect()
    }

    #[test]
    fn exact_points_recovered() {
        let e = Ellipse {
            center: (0.5, -0.2),
            a: 3.0,
            b: 2.0,
            theta: 0.4,
        };
        let f = fit_ellipse(&ellipse_points(&e, 8)).unwrap();
        assert!((f.center.0 - 0.5).abs() < 1e-6 && (f.center.1 + 0.2).abs() < 1e-6);
        assert!((f.a - 3.0).abs() < 1e-6 && (f.b - 2.0).abs() < 1e-6);
        assert!((f.theta - 0.4).abs() < 1e-6);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line: Vec<_> = (0..10).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!(matches!(fit_ellipse(&line), Err(Error::Fit(_))));
        assert!(matches!(fit_ellipse(&[(0.0, 0.0); 4]), Err(Error::Fit(_))));
    }

    #[test]
    fn uniform_patch_fails() {
        let p = Patch::new(ndarray::Array2::from_elem((80, 80), -800.0), 0.5);
        assert!(matches!(measure_fwhm(&p, &FwhmConfig::default()), Err(Error::Measurement(_))));
    }

    #[test]
    fn clean_circle_radius() {
        let cfg = SynthConfig::default();
        let label = AirwayLabel::circle(4.0, 1.5);
        let mut p = render_patch(&label, &cfg, 1).unwrap();
        p.pixels = gaussian_blur(&p.pixels, 0.5);
        let m = measure_fwhm(&p, &FwhmConfig::default()).unwrap();
        assert!((m.label.lumen_radius() - 4.0).abs() < 0.25, "{:?}", m.label);
        assert!((m.label.wall_thickness() - 1.5).abs() < 0.3, "{:?}", m.label);
    }
}
