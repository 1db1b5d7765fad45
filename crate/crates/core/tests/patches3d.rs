//! Patch extraction and segment series on phantom tube volumes.

use atn_core::fwhm::{measure_fwhm, FwhmConfig};
use atn_core::patches3d::{
    build_segment_series, extract_patch, extract_patch_in_basis, read_centerlines, read_series_csv, read_volume,
    render_tubes, straight_centerline, write_centerlines, write_series_csv, write_volume, DiameterMode,
    PhantomIntensities, SeriesOutcome, Tube, Volume3D,
};
use atn_core::patch::pixel_center_mm;
use ndarray::Array3;
use std::f64::consts::PI;

const AXIS: (f64, f64) = (27.7, 28.3);

fn tube_volume() -> Volume3D {
    let tube = Tube {
        start: [AXIS.0, AXIS.1, -5.0],
        end: [AXIS.0, AXIS.1, 40.0],
        lumen_radius_start: 3.0,
        lumen_radius_end: 3.0,
        wall_thickness: 1.2,
    };
    render_tubes((50, 80, 80), [0.7, 0.7, 0.7], [0.0; 3], &[tube], PhantomIntensities::default(), 4).unwrap()
}

#[test]
fn extracted_cross_section_matches_geometry() {
    let vol = tube_volume();
    let p = extract_patch(&vol, [AXIS.0, AXIS.1, 15.0], [0.0, 0.0, 1.0], 80, 0.5).unwrap();
    // tangent z gives u = y and v = −x
    let margin = 0.7 * 3f64.sqrt();
    let mut checked = 0;
    for ((r, c), &v) in p.pixels.indexed_iter() {
        let (x, y) = pixel_center_mm(80, 80, 0.5, r, c);
        let d = x.hypot(y);
        let expected = if d < 3.0 - margin {
            -1000.0
        } else if d > 3.0 + margin && d < 4.2 - margin {
            0.0
        } else if d > 4.2 + margin {
            -800.0
        } else {
            continue;
        };
        let world = (AXIS.0 - y, AXIS.1 + x);
        let inside = world.0 > 1.0 && world.0 < 54.0 && world.1 > 1.0 && world.1 < 54.0;
        if inside {
            assert!((v as f64 - expected).abs() < 10.0, "pixel ({r},{c}): {v} vs {expected}");
            checked += 1;
        }
    }
    assert!(checked > 4000);
}

#[test]
fn constant_tube_gives_constant_diameters() {
    let vol = tube_volume();
    let seg = straight_centerline(7, Some(3), 2, [AXIS.0, AXIS.1, 5.0], [AXIS.0, AXIS.1, 15.0], 0.5);
    let out = build_segment_series(&seg, "fwhm", DiameterMode::EquivalentArea, |p, t| {
        let patch = extract_patch(&vol, p, t, 80, 0.5)?;
        Ok(measure_fwhm(&patch, &FwhmConfig::default())?.label)
    });
    let SeriesOutcome::Built(series) = out else { panic!("{out:?}") };
    assert_eq!(series.points.len(), 17);
    assert_eq!(series.points[0].arclength_mm, 1.0);
    let d: Vec<f64> = series.diameters().iter().map(|x| x.1).collect();
    assert_eq!(d.len(), 17);
    let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi - lo < 0.05, "{d:?}");
    assert!((d[0] - 6.0).abs() < 0.3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_series_csv(&path, &[series.clone()]).unwrap();
    assert_eq!(read_series_csv(&path).unwrap(), vec![series]);
}

#[test]
fn rotating_the_basis_rotates_theta() {
    // elliptical tube along z: semi-axes 4 and 3 mm, major axis along x
    let (d, h, w) = (12, 70, 70);
    let s = 0.6;
    let c = (w as f64 * s / 2.0, h as f64 * s / 2.0);
    let data = Array3::from_shape_fn((d, h, w), |(_, j, i)| {
        let mut acc = 0.0;
        for oy in 0..3 {
            for ox in 0..3 {
                let x = (i as f64 + (ox as f64 + 0.5) / 3.0 - 0.5) * s - c.0;
                let y = (j as f64 + (oy as f64 + 0.5) / 3.0 - 0.5) * s - c.1;
                let inner = (x / 4.0).powi(2) + (y / 3.0).powi(2);
                let outer = (x / 5.2).powi(2) + (y / 4.2).powi(2);
                acc += if inner < 1.0 {
                    -1000.0
                } else if outer < 1.0 {
                    0.0
                } else {
                    -800.0
                };
            }
        }
        (acc / 9.0) as f32
    });
    let vol = Volume3D::new(data, [s, s, s], [0.0; 3]).unwrap();
    let point = [c.0, c.1, 3.0];
    let theta_at = |alpha: f64| {
        let (sa, ca) = alpha.sin_cos();
        let basis = ([ca, sa, 0.0], [-sa, ca, 0.0]);
        let p = extract_patch_in_basis(&vol, point, basis, 80, 0.5).unwrap();
        measure_fwhm(&p, &FwhmConfig::default()).unwrap().label.theta
    };
    let t0 = theta_at(0.0);
    assert!(t0.min(PI - t0) < 0.05, "theta {t0}");
    for alpha in [0.4, 1.0, 2.2] {
        let t = theta_at(alpha);
        // the patch frame turns by α, so the ellipse appears turned by −α
        let gap = (t + alpha - t0).rem_euclid(PI);
        assert!(gap.min(PI - gap) < 0.05, "alpha {alpha}: theta {t}");
    }
}

#[test]
fn volume_and_centerline_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vol = Volume3D::new(Array3::from_shape_fn((3, 4, 5), |(k, j, i)| (k * 20 + j * 5 + i) as f32), [0.5, 0.6, 0.7], [1.0, -2.0, 3.0]).unwrap();
    write_volume(&dir.path().join("vol"), &vol, &[]).unwrap();
    assert_eq!(read_volume(&dir.path().join("vol")).unwrap(), vol);

    let segs = vec![
        straight_centerline(1, None, 0, [0.0; 3], [0.0, 0.0, 4.0], 1.0),
        straight_centerline(2, Some(1), 1, [0.0, 0.0, 4.0], [3.0, 0.0, 8.0], 1.0),
    ];
    let path = dir.path().join("cl.csv");
    write_centerlines(&path, &segs).unwrap();
    let back = read_centerlines(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].parent_id, Some(1));
    assert_eq!(back[1].points.len(), segs[1].points.len());
}
