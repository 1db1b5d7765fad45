//! Orthogonal patch extraction along airway centrelines and per-segment
//! measurement series.
//!
//! Volumes are stored as a directory with `manifest.txt` and `volume.bin`
//! (`depth × height × width` little-endian `f32`, z-major). Voxel `(k, j, i)`
//! sits at `origin + (i·sx, j·sy, k·sz)` in mm.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::bundle::{read_f32_le, write_f32_le, Manifest, MANIFEST};
use crate::error::{Error, Result};
use crate::patch::{pixel_center_mm, AirwayLabel, Patch};

pub const VOLUME: &str = "volume.bin";
pub const FILL_HU: f32 = -1000.0;
pub const SERIES_STEP_MM: f64 = 0.5;
pub const PRUNE_MM: f64 = 1.0;
/// Series with a larger fraction of failed measurements are dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.3;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    /// Indexed `[z, y, x]`.
    pub data: Array3<f32>,
    /// Voxel spacing `(x, y, z)` in mm.
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Volume3D {
    pub fn new(data: Array3<f32>, spacing: Vec3, origin: Vec3) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("voxel spacing {spacing:?} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("volume is empty".into()));
        }
        Ok(Volume3D { data, spacing, origin })
    }

    /// `(depth, height, width)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Continuous voxel index `(x, y, z)` of a world point.
    fn index_of(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (d, h, w) = self.dim();
        let q = self.index_of(p);
        let within = |v: f64, n: usize| v >= 0.0 && v <= (n - 1) as f64;
        within(q[0], w) && within(q[1], h) && within(q[2], d)
    }

    fn voxel(&self, i: i64, j: i64, k: i64) -> f32 {
        let (d, h, w) = self.dim();
        if i < 0 || j < 0 || k < 0 || i >= w as i64 || j >= h as i64 || k >= d as i64 {
            FILL_HU
        } else {
            self.data[[k as usize, j as usize, i as usize]]
        }
    }

    /// Trilinear interpolation; voxels outside the grid read as −1000 HU.
    pub fn sample(&self, p: Vec3) -> f64 {
        let q = self.index_of(p);
        let base = q.map(|v| v.floor());
        let f = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
        let (i0, j0, k0) = (base[0] as i64, base[1] as i64, base[2] as i64);
        let mut acc = 0.0;
        for dk in 0..2 {
            let wk = if dk == 0 { 1.0 - f[2] } else { f[2] };
            if wk == 0.0 {
                continue;
            }
            for dj in 0..2 {
                let wj = if dj == 0 { 1.0 - f[1] } else { f[1] };
                if wj == 0.0 {
                    continue;
                }
                for di in 0..2 {
                    let wi = if di == 0 { 1.0 - f[0] } else { f[0] };
                    if wi == 0.0 {
                        continue;
                    }
                    acc += wk * wj * wi * self.voxel(i0 + di, j0 + dj, k0 + dk) as f64;
                }
            }
        }
        acc
    }
}

pub fn write_volume(dir: &Path, vol: &Volume3D, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, w) = vol.dim();
    let mut m = Manifest::new();
    m.set("depth", d);
    m.set("height", h);
    m.set("width", w);
    m.set("spacing_mm", format!("{},{},{}", vol.spacing[0], vol.spacing[1], vol.spacing[2]));
    m.set("origin_mm", format!("{},{},{}", vol.origin[0], vol.origin[1], vol.origin[2]));
    m.set("dtype", "float32-le");
    m.set("order", "z-major");
    for (k, v) in extra {
        m.set(k, v);
    }
    m.write(&dir.join(MANIFEST))?;
    let slices: Vec<Array2<f32>> = vol.data.outer_iter().map(|s| s.to_owned()).collect();
    let refs: Vec<&Array2<f32>> = slices.iter().collect();
    write_f32_le(&dir.join(VOLUME), &refs)
}

fn parse_vec3(m: &Manifest, key: &str) -> Result<Vec3> {
    let raw: String = m.require(key)?;
    let parts: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data(format!("manifest key `{key}` is not three numbers")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::Data(format!("manifest key `{key}` is not three numbers")))
}

pub fn read_volume(dir: &Path) -> Result<Volume3D> {
    let m = Manifest::read(&dir.join(MANIFEST))?;
    let (d, h, w): (usize, usize, usize) = (m.require("depth")?, m.require("height")?, m.require("width")?);
    let data = read_f32_le(&dir.join(VOLUME), d * h * w)?;
    let arr = Array3::from_shape_vec((d, h, w), data).expect("length checked");
    Volume3D::new(arr, parse_vec3(&m, "spacing_mm")?, parse_vec3(&m, "origin_mm")?)
}

/// In-plane orthonormal basis `(u, v)` for a unit tangent: `u = t × e`
/// normalised, with `e` the coordinate axis least aligned with `t` (ties in
/// x, y, z order), and `v = t × u`.
pub fn plane_basis(t: Vec3) -> (Vec3, Vec3) {
    let mut axis = 0;
    for k in 1..3 {
        if t[k].abs() < t[axis].abs() {
            axis = k;
        }
    }
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let u = cross(t, e);
    let u = scale(u, 1.0 / norm(u));
    (u, cross(t, u))
}

fn check_unit(t: Vec3) -> Result<()> {
    if (norm(t) - 1.0).abs() > 1e-6 {
        return Err(Error::Argument(format!("tangent {t:?} is not unit length")));
    }
    Ok(())
}

/// Sample a `size × size` plane orthogonal to `tangent`, centred at `point`.
/// Patch pixel `(row, col)` sits at `point + x·u + y·v` with `(x, y)` the usual
/// pixel-centre offsets.
pub fn extract_patch(vol: &Volume3D, point: Vec3, tangent: Vec3, size: usize, spacing_mm: f64) -> Result<Patch> {
    check_unit(tangent)?;
    let (u, v) = plane_basis(tangent);
    extract_patch_in_basis(vol, point, (u, v), size, spacing_mm)
}

/// As [`extract_patch`] with an explicit orthonormal in-plane basis.
pub fn extract_patch_in_basis(
    vol: &Volume3D,
    point: Vec3,
    (u, v): (Vec3, Vec3),
    size: usize,
    spacing_mm: f64,
) -> Result<Patch> {
    if !vol.contains(point) {
        return Err(Error::Extraction(format!("point {point:?} lies outside the volume")));
    }
    let pixels = Array2::from_shape_fn((size, size), |(r, c)| {
        let (x, y) = pixel_center_mm(size, size, spacing_mm, r, c);
        vol.sample(add(point, add(scale(u, x), scale(v, y)))) as f32
    });
    Ok(Patch::new(pixels, spacing_mm))
}

/// One airway segment's centreline, ordered along the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    pub segment_id: u64,
    pub parent_id: Option<u64>,
    pub generation: u32,
    pub points: Vec<Vec3>,
    pub tangents: Vec<Vec3>,
}

impl Centerline {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.points.len() != self.tangents.len() {
            return Err(Error::Data(format!("segment {}: empty or ragged centreline", self.segment_id)));
        }
        for t in &self.tangents {
            if (norm(*t) - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("segment {}: tangent {t:?} not unit length", self.segment_id)));
            }
        }
        for w in self.points.windows(2) {
            if norm(sub(w[1], w[0])) > 1.0 + 1e-9 {
                return Err(Error::Data(format!(
                    "segment {}: consecutive points more than 1 mm apart",
                    self.segment_id
                )));
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| norm(sub(w[1], w[0]))).sum()
    }

    fn reverse(&mut self) {
        self.points.reverse();
        self.tangents.reverse();
        for t in &mut self.tangents {
            *t = scale(*t, -1.0);
        }
    }

    /// Point and unit tangent at arclength `s` by linear interpolation.
    pub fn at(&self, s: f64) -> (Vec3, Vec3) {
        let mut acc = 0.0;
        for (i, w) in self.points.windows(2).enumerate() {
            let len = norm(sub(w[1], w[0]));
            if s <= acc + len || i == self.points.len() - 2 {
                let f = if len > 0.0 { ((s - acc) / len).clamp(0.0, 1.0) } else { 0.0 };
                let p = add(w[0], scale(sub(w[1], w[0]), f));
                let t = add(scale(self.tangents[i], 1.0 - f), scale(self.tangents[i + 1], f));
                let n = norm(t);
                let t = if n > 0.0 { scale(t, 1.0 / n) } else { self.tangents[i] };
                return (p, t);
            }
            acc += len;
        }
        (self.points[0], self.tangents[0])
    }
}

pub const CENTERLINE_HEADER: [&str; 9] = [
    "segment_id", "parent_id", "generation", "x_mm", "y_mm", "z_mm", "tx", "ty", "tz",
];

#[derive(Debug, Deserialize)]
struct CenterlineRow {
    segment_id: u64,
    parent_id: Option<u64>,
    generation: u32,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

/// Segments in order of first appearance.
pub fn read_centerlines(path: &Path) -> Result<Vec<Centerline>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CENTERLINE_HEADER {
        return Err(Error::Data(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut segs: Vec<Centerline> = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    for row in rdr.deserialize::<CenterlineRow>() {
        let r = row.map_err(|e| Error::csv(path, e))?;
        let i = *index.entry(r.segment_id).or_insert_with(|| {
            segs.push(Centerline {
                segment_id: r.segment_id,
                parent_id: r.parent_id,
                generation: r.generation,
                points: Vec::new(),
                tangents: Vec::new(),
            });
            segs.len() - 1
        });
        let s = &mut segs[i];
        if s.parent_id != r.parent_id || s.generation != r.generation {
            return Err(Error::Data(format!(
                "{}: segment {} changes parent or generation",
                path.display(),
                r.segment_id
            )));
        }
        s.points.push([r.x_mm, r.y_mm, r.z_mm]);
        s.tangents.push([r.tx, r.ty, r.tz]);
    }
    for s in &segs {
        s.validate()?;
    }
    Ok(segs)
}

pub fn write_centerlines(path: &Path, segs: &[Centerline]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(CENTERLINE_HEADER).map_err(|e| Error::csv(path, e))?;
    for s in segs {
        for (p, t) in s.points.iter().zip(&s.tangents) {
            let parent = s.parent_id.map(|p| p.to_string()).unwrap_or_default();
            let rec = [
                s.segment_id.to_string(),
                parent,
                s.generation.to_string(),
                p[0].to_string(),
                p[1].to_string(),
                p[2].to_string(),
                t[0].to_string(),
                t[1].to_string(),
                t[2].to_string(),
            ];
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Orient every child segment proximal → distal: a segment is reversed when
/// its last point is nearer its parent's (already oriented) end than its
/// first point is. Roots keep their given order.
pub fn orient_segments(segs: &mut [Centerline]) {
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by_key(|&i| segs[i].generation);
    let mut ends: HashMap<u64, Vec3> = HashMap::new();
    for i in order {
        if let Some(pe) = segs[i].parent_id.and_then(|p| ends.get(&p)).copied() {
            let s = &segs[i];
            let first = norm(sub(s.points[0], pe));
            let last = norm(sub(*s.points.last().expect("validated"), pe));
            if last < first {
                segs[i].reverse();
            }
        }
        ends.insert(segs[i].segment_id, *segs[i].points.last().expect("validated"));
    }
}

/// Trachea (generation 0) and main bronchi (generation 1) are not biomarker
/// segments, though their series may serve as parents.
pub fn is_biomarker_generation(generation: u32) -> bool {
    generation >= 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiameterMode {
    /// `2·√(R_A·R_B)`, the diameter of the circle with the ellipse's area.
    #[default]
    EquivalentArea,
    /// `R_A + R_B`.
    MeanOfAxes,
}

impl DiameterMode {
    pub fn diameter(self, l: &AirwayLabel) -> f64 {
        match self {
            DiameterMode::EquivalentArea => 2.0 * (l.r_a * l.r_b).sqrt(),
            DiameterMode::MeanOfAxes => l.r_a + l.r_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub arclength_mm: f64,
    /// `None` where the measurement failed.
    pub diameter_mm: Option<f64>,
    pub area_mm2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSeries {
    pub segment_id: u64,
    pub parent_id: Option<u64>,
    pub generation: u32,
    pub method: String,
    pub points: Vec<SeriesPoint>,
}

impl SegmentSeries {
    /// `(arclength, diameter)` for successful measurements.
    pub fn diameters(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.diameter_mm.map(|d| (p.arclength_mm, d)))
            .collect()
    }

    pub fn areas(&self) -> Vec<f64> {
        self.points.iter().filter_map(|p| p.area_mm2).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeriesOutcome {
    Built(SegmentSeries),
    Excluded { segment_id: u64, reason: String },
}

/// Arclengths of the sample positions: from 1 mm to `length − 1` mm in 0.5 mm
/// steps, measured from the segment start. Empty when the segment is 2 mm or
/// shorter.
pub fn sample_arclengths(length: f64) -> Vec<f64> {
    if length <= 2.0 * PRUNE_MM {
        return Vec::new();
    }
    let n = ((length - 2.0 * PRUNE_MM) / SERIES_STEP_MM + 1e-9).floor() as usize + 1;
    (0..n).map(|i| PRUNE_MM + i as f64 * SERIES_STEP_MM).collect()
}

/// Measure a segment at its sample positions. `measure` receives the point and
/// unit tangent and returns the inner ellipse.
pub fn build_segment_series<F>(seg: &Centerline, method: &str, mode: DiameterMode, measure: F) -> SeriesOutcome
where
    F: Fn(Vec3, Vec3) -> Result<AirwayLabel> + Sync,
{
    use rayon::prelude::*;
    let positions = sample_arclengths(seg.length());
    if positions.is_empty() {
        return SeriesOutcome::Excluded {
            segment_id: seg.segment_id,
            reason: "too short after pruning".into(),
        };
    }
    let samples: Vec<(f64, Option<AirwayLabel>)> = positions
        .par_iter()
        .map(|&s| {
            let (p, t) = seg.at(s);
            (s, measure(p, t).ok())
        })
        .collect();
    assemble_series(seg.segment_id, seg.parent_id, seg.generation, method, mode, &samples)
}

/// Build a series from measurements already taken at `(arclength, label)`
/// positions. Labels with a non-positive lumen radius count as failures; the
/// segment is excluded when more than [`MAX_MISSING_FRACTION`] failed.
pub fn assemble_series(
    segment_id: u64,
    parent_id: Option<u64>,
    generation: u32,
    method: &str,
    mode: DiameterMode,
    samples: &[(f64, Option<AirwayLabel>)],
) -> SeriesOutcome {
    if samples.is_empty() {
        return SeriesOutcome::Excluded {
            segment_id,
            reason: "no sample positions".into(),
        };
    }
    let points: Vec<SeriesPoint> = samples
        .iter()
        .map(|&(s, label)| {
            let label = label.filter(|l| l.r_a > 0.0 && l.r_b > 0.0);
            SeriesPoint {
                arclength_mm: s,
                diameter_mm: label.map(|l| mode.diameter(&l)),
                area_mm2: label.map(|l| std::f64::consts::PI * l.r_a * l.r_b),
            }
        })
        .collect();
    let missing = points.iter().filter(|p| p.diameter_mm.is_none()).count();
    if missing as f64 > MAX_MISSING_FRACTION * points.len() as f64 {
        return SeriesOutcome::Excluded {
            segment_id,
            reason: format!("{missing} of {} measurements failed", points.len()),
        };
    }
    SeriesOutcome::Built(SegmentSeries {
        segment_id,
        parent_id,
        generation,
        method: method.to_string(),
        points,
    })
}

pub const SERIES_HEADER: [&str; 7] = [
    "segment_id", "parent_id", "generation", "arclength_mm", "diameter_mm", "area_mm2", "method",
];

pub fn write_series_csv(path: &Path, series: &[SegmentSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(SERIES_HEADER).map_err(|e| Error::csv(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in series {
        for p in &s.points {
            let rec = [
                s.segment_id.to_string(),
                s.parent_id.map(|p| p.to_string()).unwrap_or_default(),
                s.generation.to_string(),
                p.arclength_mm.to_string(),
                opt(p.diameter_mm),
                opt(p.area_mm2),
                s.method.clone(),
            ];
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct SeriesRow {
    segment_id: u64,
    parent_id: Option<u64>,
    generation: u32,
    arclength_mm: f64,
    diameter_mm: Option<f64>,
    area_mm2: Option<f64>,
    method: String,
}

pub fn read_series_csv(path: &Path) -> Result<Vec<SegmentSeries>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out: Vec<SegmentSeries> = Vec::new();
    for row in rdr.deserialize::<SeriesRow>() {
        let r = row.map_err(|e| Error::csv(path, e))?;
        let point = SeriesPoint {
            arclength_mm: r.arclength_mm,
            diameter_mm: r.diameter_mm,
            area_mm2: r.area_mm2,
        };
        match out.last_mut() {
            Some(s) if s.segment_id == r.segment_id && s.method == r.method => s.points.push(point),
            _ => out.push(SegmentSeries {
                segment_id: r.segment_id,
                parent_id: r.parent_id,
                generation: r.generation,
                method: r.method,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}

/// Straight tapered tube for phantom volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tube {
    pub start: Vec3,
    pub end: Vec3,
    pub lumen_radius_start: f64,
    pub lumen_radius_end: f64,
    pub wall_thickness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomIntensities {
    pub lumen_hu: f32,
    pub wall_hu: f32,
    pub background_hu: f32,
}

impl Default for PhantomIntensities {
    fn default() -> Self {
        PhantomIntensities {
            lumen_hu: -1000.0,
            wall_hu: 0.0,
            background_hu: -800.0,
        }
    }
}

impl Tube {
    /// Axial fraction and radial distance of `p`, with the fraction clamped
    /// to the tube's extent (rounded ends).
    fn locate(&self, p: Vec3) -> (f64, f64) {
        let d = sub(self.end, self.start);
        let len2 = dot(d, d);
        let s = if len2 > 0.0 { (dot(sub(p, self.start), d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = add(self.start, scale(d, s));
        (s, norm(sub(p, q)))
    }

    fn lumen_radius(&self, s: f64) -> f64 {
        self.lumen_radius_start + s * (self.lumen_radius_end - self.lumen_radius_start)
    }
}

/// Render tubes into a volume by `supersample³` point sampling per voxel. Any
/// lumen beats any wall, so branches join with open lumens.
pub fn render_tubes(
    dims: (usize, usize, usize),
    spacing: Vec3,
    origin: Vec3,
    tubes: &[Tube],
    hu: PhantomIntensities,
    supersample: usize,
) -> Result<Volume3D> {
    use rayon::prelude::*;
    let (d, h, w) = dims;
    let n = supersample.max(1);
    let offsets: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64 - 0.5).collect();
    let classify = |p: Vec3| -> f32 {
        let mut wall = false;
        for t in tubes {
            let (s, r) = t.locate(p);
            let lr = t.lumen_radius(s);
            if r < lr {
                return hu.lumen_hu;
            }
            if r < lr + t.wall_thickness {
                wall = true;
            }
        }
        if wall {
            hu.wall_hu
        } else {
            hu.background_hu
        }
    };
    // a voxel whose centre is over half a diagonal outside every tube's outer
    // surface cannot contain tube samples (the margin grows with the taper)
    let half_diag = 0.5 * norm(spacing);
    let far = |p: Vec3| {
        tubes.iter().all(|t| {
            let (s, r) = t.locate(p);
            let len = norm(sub(t.end, t.start));
            let slope = if len > 0.0 { (t.lumen_radius_end - t.lumen_radius_start).abs() / len } else { 0.0 };
            r > t.lumen_radius(s) + t.wall_thickness + half_diag * (1.0 + slope)
        })
    };
    let slices: Vec<Array2<f32>> = (0..d)
        .into_par_iter()
        .map(|k| {
            Array2::from_shape_fn((h, w), |(j, i)| {
                let centre = [
                    origin[0] + i as f64 * spacing[0],
                    origin[1] + j as f64 * spacing[1],
                    origin[2] + k as f64 * spacing[2],
                ];
                if far(centre) {
                    return hu.background_hu;
                }
                let mut acc = 0.0f64;
                for oz in &offsets {
                    for oy in &offsets {
                        for ox in &offsets {
                            let p = [
                                origin[0] + (i as f64 + ox) * spacing[0],
                                origin[1] + (j as f64 + oy) * spacing[1],
                                origin[2] + (k as f64 + oz) * spacing[2],
                            ];
                            acc += classify(p) as f64;
                        }
                    }
                }
                (acc / (n * n * n) as f64) as f32
            })
        })
        .collect();
    let mut data = Array3::zeros((d, h, w));
    for (k, s) in slices.into_iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), k).assign(&s);
    }
    Volume3D::new(data, spacing, origin)
}

/// Straight centreline from `a` to `b` with points at most `step` mm apart.
pub fn straight_centerline(segment_id: u64, parent_id: Option<u64>, generation: u32, a: Vec3, b: Vec3, step: f64) -> Centerline {
    let d = sub(b, a);
    let len = norm(d);
    let n = (len / step).ceil().max(1.0) as usize;
    let t = scale(d, 1.0 / len);
    Centerline {
        segment_id,
        parent_id,
        generation,
        points: (0..=n).map(|i| add(a, scale(d, i as f64 / n as f64))).collect(),
        tangents: vec![t; n + 1],
    }
}
