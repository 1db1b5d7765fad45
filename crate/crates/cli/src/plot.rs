//! PNG figures drawn directly into pixel buffers: loss curves, patch grids and
//! ellipse overlays. Axis extents are printed with a small bitmap digit font.

use std::path::Path;

use atn_core::AirwayLabel;
use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{CliError, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const LUMEN_COLOR: Rgb<u8> = Rgb([255, 60, 60]);
const WALL_COLOR: Rgb<u8> = Rgb([60, 220, 60]);

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line.
pub fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// 3×5 glyphs, one row per `u8` (low 3 bits, leftmost pixel is bit 2).
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

/// Draw `text` with its top-left corner at `(x, y)`, each font pixel `k`×`k`.
pub fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, k: i64, c: Rgb<u8>) {
    let mut cx = x;
    for ch in s.chars() {
        if let Some(g) = glyph(ch) {
            for (r, bits) in g.iter().enumerate() {
                for b in 0..3 {
                    if bits & (4 >> b) != 0 {
                        for dy in 0..k {
                            for dx in 0..k {
                                put(img, cx + b * k + dx, y + r as i64 * k + dy, c);
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * k;
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// One curve of a line chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with shared axes. With `log_y` every value must be positive;
/// non-positive points are skipped.
pub fn line_chart(series: &[Series], width: u32, height: u32, log_y: bool) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let (left, right, top, bottom) = (60i64, 12i64, 12i64, 30i64);
    let pw = width as i64 - left - right;
    let ph = height as i64 - top - bottom;
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, ty(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    line(&mut img, (left, top), (left, top + ph), AXIS);
    line(&mut img, (left, top + ph), (left + pw, top + ph), AXIS);
    if !x0.is_finite() {
        return img;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let to_px = |(x, y): (f64, f64)| {
        (
            left + ((x - x0) / (x1 - x0) * pw as f64).round() as i64,
            top + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64,
        )
    };
    for (k, p) in pts.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        for w in p.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), c);
        }
        if p.len() == 1 {
            let (x, y) = to_px(p[0]);
            line(&mut img, (x - 2, y), (x + 2, y), c);
        }
    }
    let untick = |y: f64| if log_y { 10f64.powf(y) } else { y };
    text(&mut img, 2, top, &fmt_tick(untick(y1)), 2, AXIS);
    text(&mut img, 2, top + ph - 10, &fmt_tick(untick(y0)), 2, AXIS);
    text(&mut img, left, top + ph + 8, &fmt_tick(x0), 2, AXIS);
    let xs = fmt_tick(x1);
    text(&mut img, left + pw - 8 * xs.len() as i64, top + ph + 8, &xs, 2, AXIS);
    // legend swatches, one per series, in palette order
    for k in 0..series.len() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let y = top + 4 + 6 * k as i64;
        line(&mut img, (left + pw - 20, y), (left + pw - 4, y), c);
    }
    img
}

/// Grayscale image of `pixels` mapped from `[lo, hi]`, each pixel `scale`×`scale`.
pub fn grayscale(pixels: &Array2<f32>, lo: f32, hi: f32, scale: u32) -> RgbImage {
    let (h, w) = pixels.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = pixels[[(y / scale) as usize, (x / scale) as usize]];
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

/// Grayscale using the patch's own 1st to 99th percentile range.
pub fn auto_grayscale(pixels: &Array2<f32>, scale: u32) -> RgbImage {
    let mut v: Vec<f32> = pixels.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return grayscale(pixels, 0.0, 1.0, scale);
    }
    v.sort_by(f32::total_cmp);
    let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
    grayscale(pixels, q(0.01), q(0.99), scale)
}

/// Tiles in row-major order, `cols` per row, separated by `gap` pixels.
pub fn tile(images: &[RgbImage], cols: usize, gap: u32) -> RgbImage {
    if images.is_empty() {
        return RgbImage::from_pixel(1, 1, WHITE);
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let cw = images.iter().map(|i| i.width()).max().unwrap_or(1);
    let ch = images.iter().map(|i| i.height()).max().unwrap_or(1);
    let mut out = RgbImage::from_pixel(
        cols as u32 * (cw + gap) + gap,
        rows as u32 * (ch + gap) + gap,
        WHITE,
    );
    for (k, im) in images.iter().enumerate() {
        let x = gap + (k % cols) as u32 * (cw + gap);
        let y = gap + (k / cols) as u32 * (ch + gap);
        image::imageops::overlay(&mut out, im, x as i64, y as i64);
    }
    out
}

/// Outline of an ellipse with semi-axes `a`, `b` (mm) on an image of a patch
/// `h`×`w` pixels at `spacing` mm, upscaled by `scale`.
#[allow(clippy::too_many_arguments)]
fn ellipse_outline(
    img: &mut RgbImage,
    l: &AirwayLabel,
    a: f64,
    b: f64,
    h: usize,
    w: usize,
    spacing: f64,
    scale: u32,
    c: Rgb<u8>,
) {
    let n = 180;
    let (st, ct) = l.theta.sin_cos();
    let to_px = |phi: f64| {
        let (ex, ey) = (a * phi.cos(), b * phi.sin());
        let x = l.c_x + ex * ct - ey * st;
        let y = l.c_y + ex * st + ey * ct;
        let col = x / spacing + w as f64 / 2.0 - 0.5;
        let row = y / spacing + h as f64 / 2.0 - 0.5;
        let s = scale as f64;
        (((col + 0.5) * s).round() as i64, ((row + 0.5) * s).round() as i64)
    };
    for i in 0..n {
        let p0 = to_px(i as f64 / n as f64 * std::f64::consts::TAU);
        let p1 = to_px((i + 1) as f64 / n as f64 * std::f64::consts::TAU);
        line(img, p0, p1, c);
    }
}

/// Patch with the lumen (red) and outer wall (green) ellipses drawn over it.
pub fn overlay(pixels: &Array2<f32>, spacing_mm: f64, label: Option<&AirwayLabel>, scale: u32) -> RgbImage {
    let mut img = auto_grayscale(pixels, scale);
    if let Some(l) = label {
        let (h, w) = pixels.dim();
        ellipse_outline(&mut img, l, l.r_a, l.r_b, h, w, spacing_mm, scale, LUMEN_COLOR);
        ellipse_outline(&mut img, l, l.w_a, l.w_b, h, w, spacing_mm, scale, WALL_COLOR);
    }
    img
}

/// Numeric columns of a CSV history: `(x column name, [(column, points)])`.
/// The first column is the x axis; empty cells are skipped.
pub fn read_history(path: &Path) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| atn_core::Error::csv(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| atn_core::Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(CliError::Core(atn_core::Error::Data(format!(
            "{}: a history needs an x column and at least one value column",
            path.display()
        ))));
    }
    let mut series: Vec<Series> = header[1..]
        .iter()
        .map(|n| Series {
            name: n.clone(),
            points: Vec::new(),
        })
        .collect();
    for rec in r.records() {
        let rec = rec.map_err(|e| atn_core::Error::csv(path, e))?;
        let Some(x) = rec.get(0).and_then(|s| s.parse::<f64>().ok()) else {
            continue;
        };
        for (k, s) in series.iter_mut().enumerate() {
            if let Some(y) = rec.get(k + 1).and_then(|s| s.parse::<f64>().ok()) {
                s.points.push((x, y));
            }
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_endpoints_are_drawn() {
        let mut img = RgbImage::from_pixel(10, 10, WHITE);
        line(&mut img, (1, 2), (8, 7), AXIS);
        assert_eq!(*img.get_pixel(1, 2), AXIS);
        assert_eq!(*img.get_pixel(8, 7), AXIS);
    }

    #[test]
    fn overlay_circle_hits_expected_pixels() {
        // 2 mm radius circle on a 20 px patch at 0.5 mm: 4 px right of centre
        let px = Array2::zeros((20, 20));
        let l = AirwayLabel::circle(2.0, 1.0);
        let img = overlay(&px, 0.5, Some(&l), 1);
        assert_eq!(*img.get_pixel(14, 10), LUMEN_COLOR);
        assert_eq!(*img.get_pixel(16, 10), WALL_COLOR);
    }

    #[test]
    fn tile_layout() {
        let a = RgbImage::from_pixel(4, 3, AXIS);
        let t = tile(&[a.clone(), a.clone(), a], 2, 1);
        assert_eq!((t.width(), t.height()), (11, 9));
    }

    #[test]
    fn chart_handles_log_and_constant_series() {
        let s = vec![
            Series {
                name: "a".into(),
                points: vec![(1.0, 1.0), (2.0, 0.1), (3.0, 0.0)],
            },
            Series {
                name: "b".into(),
                points: vec![(1.0, 0.5), (3.0, 0.5)],
            },
        ];
        let img = line_chart(&s, 200, 120, true);
        assert_eq!(img.dimensions(), (200, 120));
    }
}
