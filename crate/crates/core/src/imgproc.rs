//! Small image helpers shared by rendering, augmentation and FWHM.

use ndarray::Array2;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders. `sigma <= 0` is a copy.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let jj = clamp(j as isize + t as isize - r, w);
                acc += kv * img[[i, jj]] as f64;
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let ii = clamp(i as isize + t as isize - r, h);
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc as f32;
        }
    }
    out
}

/// Bilinear lookup at fractional `(row, col)`; coordinates are clamped to the image.
pub fn bilinear(img: &Array2<f32>, row: f64, col: f64) -> f64 {
    let (h, w) = img.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = (r.floor() as usize).min(h.saturating_sub(2));
    let c0 = (c.floor() as usize).min(w.saturating_sub(2));
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let v00 = img[[r0, c0]] as f64;
    let v01 = img[[r0, c1]] as f64;
    let v10 = img[[r1, c0]] as f64;
    let v11 = img[[r1, c1]] as f64;
    (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01) + fr * ((1.0 - fc) * v10 + fc * v11)
}

/// Centre crop to `size × size`.
pub fn center_crop(img: &Array2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let r0 = (h - size) / 2;
    let c0 = (w - size) / 2;
    img.slice(ndarray::s![r0..r0 + size, c0..c0 + size]).to_owned()
}

pub fn mean_std(img: &Array2<f32>) -> (f64, f64) {
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant_and_mass() {
        let img = Array2::from_elem((10, 12), 3.5f32);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.iter().all(|&v| (v - 3.5).abs() < 1e-5));
    }

    #[test]
    fn bilinear_hits_grid_values() {
        let img = Array2::from_shape_fn((4, 5), |(i, j)| (i * 10 + j) as f32);
        assert_eq!(bilinear(&img, 2.0, 3.0), 23.0);
        assert!((bilinear(&img, 1.5, 2.5) - 17.5).abs() < 1e-12);
        assert_eq!(bilinear(&img, 3.0, 4.0), 34.0);
    }

    #[test]
    fn crop_is_centred() {
        let img = Array2::from_shape_fn((8, 8), |(i, j)| (i * 8 + j) as f32);
        let c = center_crop(&img, 4);
        assert_eq!(c[[0, 0]], 18.0);
    }
}
